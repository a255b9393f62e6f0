"""
多目标投放优化主程序

在用户 × 物品的投放变量上最小化 −aᵀx + (γ/2)xᵀx，约束为全局预算与用户级约束。
主要功能包括：
- 第一阶段：对采样用户组装非负对偶QP，用 ADMM 求出预算对偶 μ
- 第二阶段：固定 μ，逐用户做闭式或投影恢复
- 约束DAG拆分求解与矩匹配方差缩减实验

使用示例：
    python main.py gen --kind uniform --param N=10 --param M=3   # 生成实例
    python main.py solve --instance out/instance.json            # 两阶段求解
    python main.py split-curve -K 3 --reps 10                    # 拆分曲线
    python main.py variance-table -n 100 --reps 30               # 方差对比
"""

import sys
import os

# 添加src目录到Python路径
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from cli import main


if __name__ == "__main__":
    sys.exit(main())
