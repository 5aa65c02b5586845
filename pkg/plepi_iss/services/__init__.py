# 初始化服务包
