# %% [markdown]
# # Extracting a target talker from a simulated array recording
#
# A four-mic circular array hears a speech-like source from a known
# direction inside diffuse noise at 0 dB SNR. We run the streaming extractor
# with and without the direction prior and compare 1-second SDR gains.

# %%
import numpy as np

from rtbse.pipeline import Pipeline, PipelineConfig, PriorConfig
from rtbse.prior import ArrayGeometry
from rtbse.simeval import make_scenario, sdr_improvement_segments

geom = ArrayGeometry.circular()
azimuth = 0.6
mix = make_scenario(20.0, geom, azimuth, seed=1)
print(mix.mixture.shape, f"input SNR {mix.snr_db:.2f} dB")

# %% [markdown]
# The first three seconds are passed through while the block estimator
# waits for enough data, so the early segments show no gain.

# %%
results = {}
for variant in ("naive", "nsr"):
    pipe = Pipeline(PipelineConfig(variant=variant, prior=PriorConfig(geom, azimuth)))
    y = pipe.run(mix.mixture)
    rep = sdr_improvement_segments(mix.image[:, 0], mix.mixture[:, 0], y, 16000)
    results[variant] = rep
    timing = pipe.timing_report()
    print(f"{variant:6s} median gain {rep.summary()['median']:5.2f} dB, "
          f"frame max {timing['rcscme_part']['max']:.1f} ms, RTF {timing['realtime_factor']:.2f}")

# %%
for variant, rep in results.items():
    print(variant, np.round(rep.deltas, 1))
