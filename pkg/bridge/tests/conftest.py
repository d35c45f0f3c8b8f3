import numpy as np

from scenesplat.core import Camera, ImageFrame


def front_camera(width=16, height=16):
    return Camera(fx=width * 1.1, fy=width * 1.1, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, rotation=np.eye(3), translation=np.zeros(3))


def smooth_image(rng, height, width):
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi, 3)
    img = np.stack([
        0.5 + 0.4 * np.sin(2 * np.pi * (xx + yy * 0.5) + phase[0]),
        0.5 + 0.4 * np.cos(2 * np.pi * (xx - yy) + phase[1]),
        0.5 + 0.4 * np.sin(2 * np.pi * yy + phase[2]),
    ], axis=-1)
    return ImageFrame(0.05 + 0.9 * (img - img.min()) / (img.max() - img.min()))
