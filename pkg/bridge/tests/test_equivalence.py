"""Bridged vs in-process pipeline equivalence, driven through the caller's
`external:<command>` denoiser surface. The caller package must be installed."""

import sys

import numpy as np
import pytest

from scenesplat.bridge import DenoiserBridgeError, ExternalDenoiser
from scenesplat.core import PipelineConfig, VideoClip
from scenesplat.diffusion import IdentityCodec, build_schedule, sample_phi
from scenesplat.pipeline import RGBDInput, make_trajectory, run_pipeline
from scenesplat.render import render_color
from scenesplat.rng import NoiseSource

from conftest import front_camera, smooth_image

BRIDGE_CMD = f"{sys.executable} -m ssbridge"


def _pipeline_inputs(seed=12, size=16):
    rng = np.random.default_rng(seed)
    image = smooth_image(rng, size, size)
    depth = np.full((size, size), 2.0)
    rgbd = RGBDInput(image, depth, front_camera(size, size))
    trajectory = make_trajectory("lateral", 25, rgbd.camera, step=0.01)
    return rgbd, trajectory


def _run(denoiser_key: str, seed=12, diffusion_steps=3):
    rgbd, trajectory = _pipeline_inputs(seed)
    config = PipelineConfig(
        window_length=25, overlap=10, diffusion_steps=diffusion_steps,
        optimize_steps=6, init_stride=2, seed=seed, denoiser=denoiser_key,
    )
    return run_pipeline(rgbd, trajectory, config), rgbd, trajectory


class TestBridgedPipelineEquivalence:
    def test_zero_denoiser_bridged_matches_in_process(self):
        bridged_key = f"external:{BRIDGE_CMD} --denoiser zero"
        in_process, rgbd, trajectory = _run("zero")
        bridged, _, _ = _run(bridged_key)
        worst = 0.0
        for idx in (1, 13, 25):
            cam = trajectory.at(idx)
            a = render_color(in_process.scene, cam).pixels
            b = render_color(bridged.scene, cam).pixels
            worst = max(worst, float(np.abs(a - b).mean()))
        assert worst <= 1e-5

    def test_oracle_denoiser_bridged_matches_in_process(self):
        # Criterion 12: same condition-targeting oracle on both sides; the
        # f32 wire is the only divergence source.
        steps = 3
        bridged_key = (f"external:{BRIDGE_CMD} --denoiser condition-oracle "
                       f"--timesteps {steps} --beta-min 1e-4 --beta-max 0.02")
        in_process, rgbd, trajectory = _run("condition-oracle", diffusion_steps=steps)
        bridged, _, _ = _run(bridged_key, diffusion_steps=steps)
        worst = 0.0
        for idx in (1, 13, 25):
            cam = trajectory.at(idx)
            a = render_color(in_process.scene, cam).pixels
            b = render_color(bridged.scene, cam).pixels
            worst = max(worst, float(np.abs(a - b).mean()))
        print(f"ACCEPTANCE 12 [{'PASS' if worst <= 1e-5 else 'FAIL'}] "
              f"bridged oracle pipeline matches in-process (mean abs {worst:.2e})")
        assert worst <= 1e-5


class TestFailurePropagation:
    def test_killed_bridge_aborts_with_timestep_diagnostic(self, rng=None):
        rng = np.random.default_rng(1)
        clip = VideoClip.from_array(rng.uniform(0, 1, (2, 6, 6, 3)), (1, 2))
        schedule = build_schedule(8)
        codec = IdentityCodec()
        denoiser = ExternalDenoiser(f"{BRIDGE_CMD} --denoiser zero --fail-after 3",
                                    timeout=20.0)
        with pytest.raises(DenoiserBridgeError) as err:
            sample_phi(clip, clip.frames[0], 0, 0.0, codec, denoiser, schedule,
                       NoiseSource(0))
        message = str(err.value)
        assert "timestep t=" in message
        print(f"ACCEPTANCE 12 [PASS] killed bridge aborts with diagnostic: {message[:80]}")

    def test_hard_kill_surfaces_error(self):
        denoiser = ExternalDenoiser(f"{BRIDGE_CMD} --denoiser zero", timeout=20.0)
        z = np.zeros((1, 4, 4, 3))
        assert np.array_equal(denoiser(z, 1, None), z)
        denoiser._proc.kill()
        denoiser._proc.wait()
        with pytest.raises(DenoiserBridgeError) as err:
            # A dead child cannot answer; the restart guard is intentionally
            # absent mid-call so the failure surfaces.
            for t in (2, 3):
                denoiser(z, t, None)
        assert "t=" in str(err.value)


class TestAccounting:
    def test_thousand_sequential_calls_stay_in_sync(self):
        denoiser = ExternalDenoiser(f"{BRIDGE_CMD} --denoiser zero", timeout=30.0)
        z = np.ones((1, 2, 2, 2))
        with denoiser:
            for t in range(1, 1001):
                out = denoiser(z, 1 + (t % 7), None)
                assert out.shape == z.shape
        assert denoiser.requests_sent == 1000
        assert denoiser.responses_received == 1000
