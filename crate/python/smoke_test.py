"""Smoke test for the Python extension.

Build first:
    cargo build -p sere-py --release --features extension-module
then run:
    python3 python/smoke_test.py
"""

import importlib.machinery
import importlib.util
import json
import math
import pathlib
import struct
import sys
import tempfile
import wave

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_sere():
    try:
        import sere

        return sere
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsere.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("sere", str(lib))
            spec = importlib.util.spec_from_loader("sere", loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("extension not built; see the docstring")


def write_sine(path, freq, rate=16000, seconds=1.0):
    n = int(rate * seconds)
    frames = b"".join(
        struct.pack("<h", int(0.5 * 32767 * math.sin(2 * math.pi * freq * i / rate)))
        for i in range(n)
    )
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(frames)


def main():
    sere = load_sere()
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)

        wav = tmp / "tone.wav"
        write_sine(wav, 440.0)
        feats = sere.extract_features(wav)
        assert len(feats[0]) == 4
        f0 = sorted(row[0] for row in feats)[len(feats) // 2]
        assert abs(f0 - 440.0) < 4.4, f0

        manifest = sere.write_toy(tmp / "toy")
        h = sere.read_tensor(manifest.parent / "labeled_source_000.sere")
        s = sere.read_tensor(manifest.parent / "labeled_source_000.feat")
        u = sere.enhance(h, s)
        assert len(u[0]) == len(h[0]) + 4
        res = sere.resonate(u, u, sere.IrfParams(delta=0.5))
        assert abs(res.irf - 1.0) < 1e-12, res.irf
        assert res.alignment == list(range(len(u)))

        try:
            sere.IrfParams(delta=0.0)
        except sere.SereError:
            pass
        else:
            raise AssertionError("zero temperature accepted")

        config = json.dumps({"epochs": 10, "seed": 3})
        result = sere.train(manifest, config)
        assert len(result.losses) == 10
        model = result.model
        assert model.classes == ["class0", "class1", "class2", "class3"]
        uar = model.evaluate(manifest)
        assert 0.0 <= uar[0] <= 1.0

        model.save(tmp / "ck")
        again = sere.Model.load(tmp / "ck")
        assert again.parameters == model.parameters
        label = again.classify(h, s)
        assert label in again.classes

    print(f"ok: final loss {result.final_loss:.6f}, eval UAR {uar[0]:.3f}, shot classified as {label}")


if __name__ == "__main__":
    main()
