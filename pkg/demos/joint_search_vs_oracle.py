"""The two time-synchronous joint searches against exhaustive search.

For toy models with two tokens, every output sequence up to length 3 can be
scored exactly, with the weighted sum of the CTC, attention and transducer
log-likelihoods. With wide enough beams both joint searches must return that
argmax. At ordinary widths they approximate it; the attention-call counts
show what each search paid (which one pays more depends on the model).
"""
import numpy as np

from fourdeco import models, search
from fourdeco.core import BeamConfig, DecoderWeights
from fourdeco.models import ModelParams
from fourdeco.oracles import TOY_SEARCH_MODEL

wide = BeamConfig(k_beam=10**6, k_pre=10**6, max_output_len=3)
narrow = BeamConfig(k_beam=2, k_pre=2, max_output_len=3)
mu = DecoderWeights(mu_ctc=0.1, mu_att=0.5, mu_rnnt=0.4)

for seed in range(5):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(TOY_SEARCH_MODEL, seed)
    for k in p.blocks:
        p.blocks[k] *= 3.0
    H = models.encode(p, rng.normal(size=(int(rng.integers(2, 9)), TOY_SEARCH_MODEL.feat_dim))).states
    lat = models.ctc_log_posteriors(p, H)
    oracle = search.brute_force(H, lat, p, mu, 3)
    rn = search.joint_rnnt_driven(H, lat, p, wide, mu)
    ct = search.joint_ctc_driven(H, lat, p, wide, mu)
    ct_oracle = search.brute_force(H, lat, p, mu, 3, support="ctc")
    rn2 = search.joint_rnnt_driven(H, lat, p, narrow, mu)
    ct2 = search.joint_ctc_driven(H, lat, p, narrow, mu)
    print(f"model {seed}: T={H.shape[0]}  oracle {oracle.best} ({oracle.score:.4f})")
    print(f"   wide   rnnt-driven {rn.best} ({rn.score:.4f})   ctc-driven {ct.best} "
          f"(oracle within CTC support: {ct_oracle.best})")
    print(f"   narrow rnnt-driven {rn2.best} att calls {rn2.stats['calls'].get('att_calls', 0):3d}   "
          f"ctc-driven {ct2.best} att calls {ct2.stats['calls'].get('att_calls', 0):3d}")
