"""工具模块: 日志、错误、环境变量、随机数、文件读写与激活数据"""
