"""Smoke test for the fgdisc extension module.

Build and install first:

    pip install --no-build-isolation -e crates/py
    python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import fgdisc


def main():
    notes = [(i * 240, 240, 60 + (i % 8), 100 if i % 4 == 0 else 44) for i in range(32)]
    score = fgdisc.Score(notes, 480)
    assert len(score) == 32

    tokens = score.encode()
    assert tokens[0] == "BOS" and tokens[-1] == "EOS"
    fgdisc.validate(tokens)
    ids = fgdisc.tokens_to_ids(tokens)
    assert fgdisc.vocab_size() == 277
    assert all(0 <= i < 277 for i in ids)
    assert fgdisc.ids_to_tokens(ids) == tokens
    assert fgdisc.Score.decode(tokens).encode() == tokens

    melody = fgdisc.decouple(tokens, "melody")
    rhythm = fgdisc.decouple(tokens, "rhythm")
    assert not any(t.startswith("NoteVelocity") for t in melody)
    assert not any(t.startswith("NoteOnPitch") for t in rhythm)
    up = fgdisc.pitch_augment(tokens, 3)
    assert fgdisc.decouple(up, "rhythm") == rhythm

    positions = fgdisc.bar_relative_positions(["Bar", "Position_0", "NoteOnPitch_60", "NoteDuration_4", "NoteVelocity_20", "Bar", "Position_0"])
    assert positions == [0, 1, 2, 3, 4, 0, 1]

    uniform = fgdisc.Score([(i * 480, 480, 60 + i, 80) for i in range(12)])
    assert abs(fgdisc.pitch_class_entropy(uniform) - math.log2(12)) < 1e-12
    assert abs(fgdisc.scale_consistency(uniform) - 7 / 12) < 1e-12
    assert 0.0 <= fgdisc.groove_consistency(score) <= 1.0
    assert fgdisc.histogram_divergence([1, 2, 3], [1, 2, 3]) < 1e-9
    assert abs(fgdisc.feature_cosine_similarity([1, 0], [1, 0]) - 1.0) < 1e-12
    report = json.loads(fgdisc.evaluate_corpus([score], [score]))
    assert report["velocity_divergence"] < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "piece.mid")
        score.to_midi(path)
        assert fgdisc.Score.from_midi(path).encode() == tokens

        config = {"batch_size": 1, "model": {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 32, "max_len": 256}}
        trainer = fgdisc.Trainer("toy", json.dumps(config))
        trainer.set_data([tokens, up])
        assert trainer.run("nll", 2) == 2
        assert trainer.run("disc", 1) == 1
        assert trainer.run("adv", 1) == 1
        assert trainer.step == 4
        log = json.loads(trainer.log())
        assert len(log) == 4 and log[-1]["phase"] == "adv"

        ckpt = os.path.join(tmp, "ckpt")
        trainer.save(ckpt)
        restored = fgdisc.Trainer.load(ckpt)
        cond = tokens[: tokens.index("Bar", tokens.index("Bar") + 1)]
        target = tokens[len(cond):]
        assert restored.nll(cond, target) == trainer.nll(cond, target)
        sample = restored.generate(cond, seed=1, max_new_tokens=40)
        assert sample == trainer.generate(cond, seed=1, max_new_tokens=40)
        fgdisc.validate(sample)

    print("fgdisc smoke test ok")


if __name__ == "__main__":
    main()
