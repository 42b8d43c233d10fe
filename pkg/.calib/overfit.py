import time
import numpy as np
from scenemotion import model as M, synthgen as sg, trainer as TR

t_start = time.time()
cfg = M.ModelConfig(feature_dim=64, num_heads=4, ff_multiplier=2, num_futures=6,
                    pos_embed_channels=16, time_embed_channels=16)
params = M.ModelParams.build(cfg, np.random.default_rng(0))
gen = sg.GenConfig(template="intersection", num_agents=(3,3), interaction_rate=1.0, seed=424)
scenes = [sg.generate_scene(gen, i) for i in range(8)]
tc = TR.TrainConfig(batch_size=1, lr=5e-4, seed=0, total_epochs=300, warmup_fraction=4.0,
                    loss_mode="joint", mask_mode="mp_only", dropout_prob=0.0, rotation_range=0.0)
state, step = None, 0
for chunk in range(20):
    res = TR.train(scenes, params, tc, steps=100, state=state, start_step=step)
    state = res.state; step += 100
    rep = TR.evaluate(params, scenes, tasks=("mp",), loss_mode="joint")["mp"]
    sade = rep.min_sade["all"]
    print(f"step {step:5d} loss {res.curve[-1][1]:9.2f} minSADE {sade:.3f} minADE {rep.min_ade['all']:.3f} elapsed {time.time()-t_start:.0f}s", flush=True)
    if sade < 0.25:
        print("TARGET reached at", step, flush=True)
        break
print("total %.1f min" % ((time.time()-t_start)/60), flush=True)
