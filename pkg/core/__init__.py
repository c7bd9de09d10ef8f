"""
核心业务逻辑模块

包含激活值存储、CKA 计算、加权和探测以及玩具编码器/训练器。
"""
