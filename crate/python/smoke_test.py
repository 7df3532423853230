#!/usr/bin/env python3
"""Smoke test for the inif_py extension module.

Build the extension first, then run this script:

    cargo build -p inif-py
    python3 python/smoke_test.py
"""

import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def load_extension():
    candidates = [
        ROOT / "target" / profile / "libinif_py.so"
        for profile in ("release", "debug")
    ]
    lib = next((c for c in candidates if c.exists()), None)
    if lib is None:
        sys.exit("extension not built; run: cargo build -p inif-py")
    tmp = tempfile.mkdtemp(prefix="inif_py_")
    shutil.copy(lib, pathlib.Path(tmp) / "inif_py.so")
    sys.path.insert(0, tmp)
    import inif_py

    return inif_py


def main():
    inif = load_extension()

    vol = inif.Volume.phantom("blobs", [1, 1, 8, 16, 16], dtype="u16", seed=7)
    assert vol.shape == [1, 1, 8, 16, 16]
    assert vol.dtype == "u16"
    assert vol.raw_bytes() == 8 * 16 * 16 * 2
    print("ok: phantom", vol)

    file, report = inif.compress(vol, ratio=8.0, steps=60, seed=1, batch=512)
    assert file.total_bytes <= vol.raw_bytes() // 8
    assert report["psnr_db"] > 0 and 0 <= report["ssim"] <= 1
    print("ok: compress", file, f"psnr={report['psnr_db']:.2f} dB")

    blob = file.to_bytes()
    again = inif.InifFile.from_bytes(blob)
    assert again.to_bytes() == blob
    full = file.decode()
    assert full.shape == vol.shape
    assert inif.quality(full, vol)["mse"] == report["mse"]
    print("ok: byte round trip and full decode")

    quarter = file.decode_roi([0, 0, 0, 0, 0], [1, 1, 8, 16, 16], [1, 1, 1, 1, 4])
    assert quarter.shape == [1, 1, 8, 16, 4]
    one_slice = file.decode_roi([0, 0, 3, 0, 0], [1, 1, 4, 16, 16])
    assert one_slice.shape == [1, 1, 1, 16, 16]
    print("ok: roi and strided decode")

    with tempfile.TemporaryDirectory() as td:
        ndv = pathlib.Path(td) / "vol.ndv"
        vol.save_ndv(str(ndv))
        back = inif.Volume.load_ndv(str(ndv))
        assert back.values() == vol.values() and back.shape == vol.shape
        inif_path = pathlib.Path(td) / "vol.inif"
        file.save(str(inif_path))
        assert inif.InifFile.load(str(inif_path)).to_bytes() == blob
    print("ok: file round trips")

    try:
        inif.Volume.phantom("nope", [1, 1, 8, 16, 16])
    except ValueError:
        print("ok: bad phantom kind raises ValueError")
    else:
        sys.exit("expected ValueError for bad phantom kind")

    print("smoke test passed")


if __name__ == "__main__":
    main()
