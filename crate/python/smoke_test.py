"""End-to-end check of the Python bindings on a tiny configuration."""

import math
import os
import tempfile

import latent_dyn as ld

TINY = {
    "dim": 8,
    "tokens": 4,
    "group_size": 8,
    "encoder_hidden": 8,
    "d_act": 4,
    "idm_hidden": 8,
    "cond_width": 8,
    "ffn_hidden": 8,
    "blocks": 1,
    "diffusion_steps": 10,
    "batch_size": 4,
    "k": 2,
    "epochs": 2,
}


def main():
    trajs = ld.generate_dataset(10, seed=1, scene={"n_points": 64, "length": 8})
    assert len(trajs) == 10 and len(trajs[0]) == 8 and trajs[0].n_points == 64
    assert len(trajs[0].actions()) == 7

    assert ld.fps_indices([[0, 0, 0], [1, 0, 0], [3, 0, 0]], 2) == [0, 2]
    pts = ld.backproject([[0.0, 2.0], [0.0, 0.0]], 100.0, 100.0, 0.0, 0.0)
    assert len(pts) == 1 and abs(pts[0][0] - 0.02) < 1e-6 and pts[0][2] == 2.0

    checks = ld.gradcheck(seed=0, loss_points=20)
    assert all(ok for _, _, ok in checks), [c for c in checks if not c[2]]

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "d.afro")
        ld.write_dataset(trajs, path)
        back = ld.read_dataset(path)
        assert back[3].frames() == trajs[3].frames()

        trainer = ld.Trainer(TINY)
        trainer.train(trajs, os.path.join(tmp, "run"))
        assert trainer.step > 0
        report = trainer.probe(trajs)
        assert math.isfinite(report["r2"]) and len(report["per_dim_std"]) == 8

        ckpt = os.path.join(tmp, "t.afck")
        trainer.save(ckpt)
        again = ld.Trainer.load(ckpt)
        cloud = trajs[0].frames()[0]
        assert again.encode(cloud) == trainer.encode(cloud)
        fwd = again.latent_action(cloud, trajs[0].frames()[2])
        bwd = again.latent_action(cloud, trajs[0].frames()[2], backward=True)
        assert len(fwd) == 4 and fwd != bwd

        try:
            ld.Trainer({"no_such_key": 1})
        except ValueError:
            pass
        else:
            raise AssertionError("unknown key accepted")

    print(f"smoke test passed: {len(checks)} gradient checks, probe R2 {report['r2']:.3f}")


if __name__ == "__main__":
    main()
