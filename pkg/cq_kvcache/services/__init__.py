"""服务模块: 线程池、聚类、信息统计、CQ 编解码、基线与注意力仿真"""
