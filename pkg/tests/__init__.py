"""
网络监控系统测试套件
"""

__version__ = "1.0.0"
