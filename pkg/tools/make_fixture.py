"""Regenerate the bundled keyword-demo evaluation fixture.

The fixture bytes are a pure function of KWS_FIXTURE_SEED; rerunning this
script must reproduce the committed file bit for bit.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from bmru.data import KWS_FIXTURE_COUNT, KWS_FIXTURE_SEED, kws_demo_eval_arrays, write_fseq

out = pathlib.Path(__file__).resolve().parents[1] / "src" / "bmru" / "fixtures" / "kws_demo.fseq"
feats, labels = kws_demo_eval_arrays(KWS_FIXTURE_SEED, KWS_FIXTURE_COUNT)
write_fseq(out, feats, labels, 2)
print(f"wrote {out} ({out.stat().st_size} bytes)")
