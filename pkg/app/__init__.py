# 命令行入口 (mcsv)
