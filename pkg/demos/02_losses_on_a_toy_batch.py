"""
Distillation losses on a toy batch
==================================

Build a teacher, a 1/4-width student and the distillation module on two
small scenes, then evaluate every loss term and check which parameters get
gradient. The teacher is frozen and receives none.
"""
import numpy as np

from itkd.autodiff import backward, finalize_grads, unique_parameters, zero_grads
from itkd.autodiff.tensor import Tensor
from itkd.detector import Detector, NetConfig, stack_targets, supervised_loss
from itkd.distill import DistillConfig, DistillModule, distillation_losses
from itkd.scene import GenConfig, GridConfig, encode_targets, generate_scene, pillarize

gen = GenConfig(range=8.0, min_boxes=2, max_boxes=4)
grid = GridConfig(size=32)
scenes = [generate_scene(gen, s) for s in range(2)]
x = Tensor(np.stack([pillarize(s, grid) for s in scenes]))
batch = stack_targets([encode_targets(s, grid, 3) for s in scenes])

rng = np.random.default_rng(0)
net = NetConfig(blocks=(8, 16, 16), map_channels=16, head_hidden=8)
teacher = Detector(net, rng, "teacher")
student = Detector(net.with_divisor(4), rng, "student")
kd = DistillModule(DistillConfig(), student.cfg.channels, teacher.cfg.channels, 3, rng)
teacher.freeze()

# %%
# Forward both networks and combine L_sup with the three itKD terms.
m_t, out_t = teacher(x)
m_s, out_s = student(x)
losses = distillation_losses(supervised_loss(out_s, batch), m_t, out_t, m_s, out_s, batch, kd)
for name, value in losses.values().items():
    print(f"{name:6s} {value:.4f}")

# %%
# Backward: the student, the autoencoder and the fusion layer learn; the teacher does not.
every = unique_parameters(teacher.parameters() + student.parameters() + kd.parameters())
zero_grads(every)
backward(losses.total)
finalize_grads(every)
for label, params in (("teacher", teacher.parameters()), ("student", student.parameters()),
                      ("distill module", kd.parameters())):
    norm = np.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    print(f"{label:15s} {len(params):3d} tensors  grad norm {norm:.3e}")

# %%
# The shared autoencoder is one set of weights used by both branches.
print("shared autoencoder:", kd.ae_teacher is kd.ae_student)
