"""
Adding an attribute later and serving predictions
=================================================

Train on two attributes, attach a third branch with the base frozen, save,
and query the model over HTTP.
"""

import json
import tempfile
import threading
import urllib.request
from pathlib import Path

import numpy as np

from progattr import (Dataset, SyntheticConfig, TrainConfig, add_attribute, generate_synthetic,
                      oracle_decode, preset, save_model, train_progressive)
from progattr.persistence import read_records
from progattr.data import MISSING
from progattr.service import make_server

config = SyntheticConfig(preset("jeans"), seed=2)
full, _ = generate_synthetic(config, 1000)

# Start from a catalogue that only has Fade and Shade labels.
labels = full.labels[:, :2]
keep = np.flatnonzero((labels != MISSING).any(axis=1))
two = Dataset(full.schema.subset(["Fade", "Shade"]), [full.ids[i] for i in keep],
              full.features[keep], labels[keep])
model, _ = train_progressive(two, TrainConfig(seed=2))

workdir = Path(tempfile.mkdtemp())
save_model(model, workdir / "two.patr")

# Distress arrives later. Only its new branch trains.
model, log = add_attribute(model, full, "Distress", TrainConfig(seed=2))
save_model(model, workdir / "three.patr")
before, after = read_records(workdir / "two.patr"), read_records(workdir / "three.patr")
print("old records unchanged:", all(after[k].tobytes() == v.tobytes() for k, v in before.items()))

server = make_server(workdir / "three.patr", "127.0.0.1", 0)
threading.Thread(target=server.serve_forever, daemon=True).start()
host, port = server.server_address[:2]

sample, _ = generate_synthetic(SyntheticConfig(preset("jeans"), seed=50), 1)
body = json.dumps({"shape": list(sample.features[0].shape),
                   "features_hex": sample.features[0].astype("<f4").tobytes().hex(),
                   "top_k": 2}).encode()
req = urllib.request.Request(f"http://{host}:{port}/articles/jeans/predict", data=body, method="POST")
with urllib.request.urlopen(req) as resp:
    answer = json.loads(resp.read())
print(json.dumps(answer, indent=2))
print("pixel oracle:", [config.schema.attributes[k].class_names[v]
                        for k, v in enumerate(oracle_decode(sample.features[0], config))])
server.shutdown()
