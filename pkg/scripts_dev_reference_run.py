"""Dev-only: reference run to pin acceptance bounds (criteria 5-7)."""
import json
import time

import numpy as np

from gridsr import evaluation as E
from gridsr import fields as F
from gridsr import models as M
from gridsr import training as TR

t0 = time.time()
train_stacks = [F.synth_stack(64, 64, seed=10_000 + i) for i in range(64)]
test_stacks = [F.synth_stack(64, 64, seed=20_000 + i) for i in range(16)]
transfer_stacks = [F.synth_stack(192, 192, seed=30_000 + i) for i in range(8)]
print("synth done", time.time() - t0)

spec = M.ModelSpec.vit(in_channels=19)
tc = TR.TrainConfig(lr=1e-4, epochs=30, batch_size=8, seed=0)

res_mse = TR.train(spec, train_stacks, tc, TR.LossConfig(use_mass_loss=False))
print("mse-only trained", time.time() - t0)
print("initial_mse", res_mse.initial_mse, "final", res_mse.log[-1].train_mse,
      "ratio", res_mse.log[-1].train_mse / res_mse.initial_mse)

res_mass = TR.train(spec, train_stacks, tc, TR.LossConfig(use_mass_loss=True))
print("mass trained", time.time() - t0)
print("mass run: initial_mse", res_mass.initial_mse, "final", res_mass.log[-1].train_mse,
      "ratio", res_mass.log[-1].train_mse / res_mass.initial_mse,
      "mass", res_mass.initial_mass, "->", res_mass.log[-1].train_mass)

carbon = E.CarbonConfig()
downs = {
    "bilinear": lambda c: M.bilinear_upsample(c, 2),
    "vit_mse": lambda c: M.predict(res_mse.checkpoint, c),
    "vit_mass": lambda c: M.predict(res_mass.checkpoint, c),
}
rep = E.evaluate(downs, test_stacks, F.ALL_VARS, carbon)
rows = {(r.model, r.variable): r for r in rep.rows}
out = {"train_ratio_mse_only": res_mse.log[-1].train_mse / res_mse.initial_mse,
       "train_ratio_mass": res_mass.log[-1].train_mse / res_mass.initial_mse}
for v in ("U10", "V10", "T2M", "PR"):
    out[f"rmse.bilinear.{v}"] = rows[("bilinear", v)].rmse
    out[f"rmse.vit_mse.{v}"] = rows[("vit_mse", v)].rmse
    out[f"rmse.vit_mass.{v}"] = rows[("vit_mass", v)].rmse
gap_mse = float(np.mean([rows[("vit_mse", v.name)].cons_gap_global for v in F.ALL_VARS]))
gap_mass = float(np.mean([rows[("vit_mass", v.name)].cons_gap_global for v in F.ALL_VARS]))
out["cons_gap_global.vit_mse"] = gap_mse
out["cons_gap_global.vit_mass"] = gap_mass
print("eval done", time.time() - t0)

rep_tr = E.evaluate(
    {"bilinear": downs["bilinear"], "vit_mse": downs["vit_mse"]},
    transfer_stacks, F.ALL_VARS, carbon,
)
trows = {(r.model, r.variable): r for r in rep_tr.rows}
for v in ("U10", "V10", "T2M", "PR"):
    out[f"transfer_rmse.bilinear.{v}"] = trows[("bilinear", v)].rmse
    out[f"transfer_rmse.vit_mse.{v}"] = trows[("vit_mse", v)].rmse
out["elapsed_s"] = time.time() - t0

with open("/tmp/reference_run.json", "w") as fh:
    json.dump(out, fh, indent=1)
print(json.dumps(out, indent=1))
