"""
Disk size and inference time of a shared base
=============================================

A progressive model stores its base once and runs it once per batch. An
ensemble of individual models stores and runs one base per attribute.
"""

import tempfile
from pathlib import Path

import numpy as np

from progattr import NetConfig, build_individual, build_progressive, preset
from progattr.bench import bench_inference
from progattr import save_model, size_report

schema = preset("dresses")   # seven attributes
net = NetConfig()
workdir = Path(tempfile.mkdtemp())

save_model(build_progressive(net, schema), workdir / "dresses.patr")
paths = []
for name in schema.names:
    paths.append(workdir / f"{name}.patr")
    save_model(build_individual(net, schema, name), paths[-1])

sizes = size_report(workdir / "dresses.patr", paths)
print(f"progressive {sizes.progressive_bytes} bytes, individual total {sizes.individual_bytes} bytes")
print(f"ratio {sizes.ratio:.3f}, predicted from parameter counts {sizes.predicted_ratio:.3f}")

# Timing runs single-threaded. The first repetition is a warm-up.
images = np.random.default_rng(0).standard_normal((256, 1, 32, 32)).astype(np.float32)
cmp = bench_inference(build_progressive(net, schema), images, batch_size=32, repetitions=5)
for row in cmp.to_rows():
    print(f"{row['mode']:20s} {row['wall_time'] * 1000:8.1f} ms  base passes={row['base_forward_calls']}")
print(f"latency ratio {cmp.ratio:.2f}, identical outputs: {cmp.outputs_equal}")
