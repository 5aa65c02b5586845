# 初始化命令包
