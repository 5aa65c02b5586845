# 初始化工具包
