"""Utils 模块 - 工具和辅助功能"""
