"""Smoke test for the `wisp` Python extension.

Build first:

    cargo build --release -p wisp-py --features extension-module

then run `python3 python/smoke_test.py`. The script imports an installed
`wisp` module if there is one, otherwise the freshly built library from
target/release (override with WISP_LIB=/path/to/libwisp.so).
"""

import importlib.util
import json
import os
import pathlib
import shutil
import sys
import sysconfig
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load_wisp():
    try:
        import wisp  # noqa: F401

        return wisp
    except ImportError:
        pass
    lib = os.environ.get("WISP_LIB")
    if lib is None:
        for name in ("libwisp.so", "libwisp.dylib", "wisp.dll"):
            cand = ROOT / "target" / "release" / name
            if cand.exists():
                lib = str(cand)
                break
    if lib is None:
        sys.exit("wisp extension not found; build it with "
                 "`cargo build --release -p wisp-py --features extension-module`")
    # The loader wants the module file to be named after the module.
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    tmp = pathlib.Path(tempfile.mkdtemp()) / ("wisp" + suffix)
    shutil.copy(lib, tmp)
    spec = importlib.util.spec_from_file_location("wisp", tmp)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    wisp = load_wisp()
    print("wisp", wisp.__version__)
    assert set(wisp.bundled_scenarios()) == {"default_3rx", "ap_sweep", "economy_default"}

    toml = wisp.scenario_toml("default_3rx", seed=5)
    assert "seed = 5" in toml

    quick = ["channel.frames=8"]
    csi = wisp.simulate_csi(overrides=quick)
    assert len(csi) == 3 and len(csi[0]["frames"]) == 8
    assert len(csi[0]["frames"][0]) == 3 and len(csi[0]["frames"][0][0]) == 256
    assert csi == wisp.simulate_csi(overrides=quick), "same seed must give the same CSI"

    est = wisp.estimate_paths(overrides=quick)
    for rx in est:
        assert rx["estimated_paths_count"] == 2, rx
        assert rx["user_aoa_error_deg"] < 2.0 and rx["user_tof_error_ns"] < 10.0, rx

    s = wisp.run_smsp(overrides=quick)
    assert s["location_error_m"] < 0.5, s
    assert max(s["s1_score"]) == 1.0

    best = wisp.oracle_optimal_pricing()
    assert 30.0 <= best["v_r"] <= 50.0 and best["U_vsp"] >= 2900.0, best

    ckpt = wisp.train_policy(overrides=["training.config.epochs=5", "training.config.batch_size=32"], seed=1)
    json.loads(ckpt)
    cmp = wisp.compare_with_oracle(ckpt)
    assert 0.0 <= cmp["policy"]["v_r"] <= 60.0 and cmp["oracle"] == best

    try:
        wisp.run_smsp(overrides=["channel.bogus=1"])
    except ValueError as e:
        assert "bogus" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print("smoke test passed:", json.dumps({
        "location_error_m": round(s["location_error_m"], 4),
        "oracle_v_r": best["v_r"],
        "oracle_I_b": best["I_b"],
    }))


if __name__ == "__main__":
    main()
