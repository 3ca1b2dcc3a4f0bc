"""Where hand-crafted pulse extractors stop working.

Generate a few samples from every preset domain, run GREEN, CHROM and POS
on the ROI-averaged colour traces and read HR off the spectral peak. The
clean studio domain is easy for all three; the motion domain separates the
chrominance methods from GREEN, which has no way to cancel a colour-neutral
intensity change.

    python demos/classical_baselines.py [n_per_domain]
"""
import sys

import numpy as np

from nestrppg.classical import EXTRACTORS, TraceMatrix, estimate_hr_fft
from nestrppg.metrics import hr_metrics
from nestrppg.synthdata import PRESET_DOMAINS, gen_domain_dataset

n = int(sys.argv[1]) if len(sys.argv) > 1 else 40
domains = list(PRESET_DOMAINS.values())
samples = gen_domain_dataset(domains, n, seed=0)

print(f"{'domain':<10}" + "".join(f"{m:>10}" for m in sorted(EXTRACTORS)) + "   (MAE, bpm)")
for dom in domains:
    group = [s for s in samples if s.domain_id == dom.id]
    truths = [s.hr_bpm for s in group]
    row = []
    for name in sorted(EXTRACTORS):
        preds = []
        for s in group:
            bvp = EXTRACTORS[name](TraceMatrix(s.meta["raw_rgb"], s.fps))
            # peak_ratio=0: always read a number, even from a flat spectrum
            preds.append(estimate_hr_fft(bvp, s.fps, peak_ratio=0))
        row.append(hr_metrics(preds, truths).mae)
    print(f"{dom.id:<10}" + "".join(f"{v:10.2f}" for v in row))

# a single motion sample in detail
s = next(s for s in samples if s.domain_id == "motion")
traces = TraceMatrix(s.meta["raw_rgb"], s.fps)
print(f"\nmotion sample, true HR {s.hr_bpm:.1f} bpm")
for name in sorted(EXTRACTORS):
    bvp = EXTRACTORS[name](traces)
    # the sign of the recovered pulse is a projection convention, so compare magnitudes
    r = abs(np.corrcoef(bvp, s.bvp)[0, 1])
    print(f"  {name:<6} HR {estimate_hr_fft(bvp, s.fps, peak_ratio=0):6.1f}   |corr| with true BVP {r:.3f}")
