"""Train one block to reproduce its input, then try the harder 3x3 blur target.

    python demos/train_identity.py
"""
from gspn.block import ToyTask, train_toy

for task, steps in (("identity", 500), ("fixed-blur", 2000)):
    trace, _ = train_toy(ToyTask(task), steps)
    marks = ", ".join(f"{k}: {trace[k] / trace[0]:.3f}" for k in (0, steps // 10, steps // 2, steps))
    print(f"{task:>10} loss ratio by step  {marks}")
