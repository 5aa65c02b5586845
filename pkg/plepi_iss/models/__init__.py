# 初始化模型包
