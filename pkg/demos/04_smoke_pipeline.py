"""
The whole pipeline at smoke scale
=================================

Generate data, train a teacher, distill a student, self-distill and run a
one-seed ablation matrix, all with the tiny smoke profile. Runs in seconds;
with 8 training scenes and 2 epochs every AP is 0, so only the plumbing
is on display.
"""
import sys
import tempfile
from pathlib import Path

from itkd.config import smoke_profile
from itkd.harness import cmd_ablate, cmd_distill, cmd_gen_data, cmd_self_distill, cmd_train_teacher

cfg = smoke_profile()
root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="itkd-smoke-"))
print("writing to", root)

cmd_gen_data(cfg, root / "data")
teacher_row = cmd_train_teacher(cfg, root / "data", root / "teacher")
print(f"teacher macro AP {teacher_row.macro_ap:.3f}")
teacher = root / "teacher" / "teacher.ckpt"

# %%
row = cmd_distill(cfg, teacher, root / "data", root / "distill")
print(f"distilled student macro AP {row.macro_ap:.3f}")
row = cmd_self_distill(cfg, teacher, root / "data", root / "self-distill")
print(f"self-distilled macro AP {row.macro_ap:.3f}")

# %%
cmd_ablate(cfg, teacher, root / "data", root / "ablation", seeds=(0,))
print((root / "ablation" / "ablation_report.txt").read_text())
