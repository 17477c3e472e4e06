# Copyright 2026 The emofuse Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import json
import os
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

import emofuse

ROOT = Path(__file__).resolve().parents[2]


def find_cli():
    candidates = [os.environ.get("EMOFUSE_CLI"), ROOT / "build" / "tools" / "emofuse", shutil.which("emofuse")]
    for c in candidates:
        if c and Path(c).is_file() and os.access(c, os.X_OK):
            return str(c)
    return None


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cli = find_cli()
    if cli is None:
        pytest.skip("emofuse command-line tool not built")
    work = tmp_path_factory.mktemp("model")
    config = work / "config.json"
    config.write_text(json.dumps({"model": {"tiny": True, "use_ssrl": False}, "train": {"max_epochs": 3}}))
    subprocess.run([cli, "synth", "--out", str(work / "corpus"), "--speakers", "2", "--per-class", "1"], check=True)
    subprocess.run(
        [cli, "train", "--manifest", str(work / "corpus" / "manifest.csv"), "--config", str(config),
         "--out", str(work / "run")],
        check=True,
    )
    return work


def test_predict_from_checkpoint(trained):
    model = emofuse.Model.load(str(trained / "run" / "model.ckpt"))
    wav = sorted((trained / "corpus").glob("*.wav"))[0]
    samples, rate = emofuse.read_wav(str(wav))
    p = np.array(model.predict(samples, sample_rate=rate))
    assert p.shape == (4,)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)
    assert (p >= 0).all()
    np.testing.assert_array_equal(p, model.predict(samples, sample_rate=rate))
