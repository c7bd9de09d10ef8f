"""Tests 模块 - 测试用例"""
