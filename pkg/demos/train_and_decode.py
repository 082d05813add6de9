"""A small two-stage run on the synthetic task, then every decoder on its test set.

Stage 1 trains all four heads with equal weights and records, per loss, the
epoch with the lowest validation loss. Stage 2 retrains with weights
proportional to those epochs. The resulting model is decoded with each
single decoder and with the two joint searches. Scaled down to run in about
a minute; the acceptance study uses the full-size task.
"""
from fourdeco import training
from fourdeco.core import BeamConfig
from fourdeco.models import ModelConfig

task = training.SyntheticTaskSpec(n_train=1000, n_valid=100, n_test=100, seed=7)
data = training.gen_dataset(task)
cfg = training.TwoStageConfig(ModelConfig(), training.OptimizerConfig(seed=7), stage1_epochs=6, stage2_epochs=6,
                              seed=7)
res = training.run_two_stage(data, cfg)
print("stage-1 argmin epochs (ctc, rnnt, att, mlm):", res.argmin_epochs)
print("stage-2 weights:", tuple(round(w, 3) for w in res.weights.as_tuple()))

model = res.stage2.best[training.OBJECTIVE]
beam = BeamConfig(k_beam=4, k_pre=6)
mus = {"joint-ctc-driven": training.CTC_DRIVEN_MU, "joint-rnnt-driven": training.RNNT_DRIVEN_MU}
print(f"\n{'decoder':<18} {'WER%':>6} {'CER%':>6} {'RTF':>8}  att calls/utt")
for name in ("ctc-greedy", "ctc-beam", "att", "rnnt", "maskctc", "joint-ctc-driven", "joint-rnnt-driven"):
    rep = training.evaluate(model, data["test"], name, beam, mus.get(name))
    print(f"{name:<18} {100 * rep.wer:6.2f} {100 * rep.cer:6.2f} {rep.rtf:8.4f}  "
          f"{rep.calls_per_utt.get('att_calls', 0.0):.1f}")
