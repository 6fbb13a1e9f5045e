"""
Sprite World: a deterministic pixel environment with moving sprites.

Frames are rendered natively as frame_size x frame_size grayscale in [0, 1]:
textureless sprites at distinct gray levels over a black background, plus a
controllable outlined-square avatar. Every rendered pixel is traceable to the
sprite that drew it, so ground-truth masks come for free.
"""

import logging
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import numpy as np

from .config import validate_model
from .schemas import EnvConfig

logger = logging.getLogger(__name__)

ACTIONS = ("noop", "up", "down", "left", "right")
NUM_ACTIONS = len(ACTIONS)

# (drow, dcol) per action
_ACTION_DELTAS = np.array([(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)], dtype=np.int64)

AVATAR_LEVEL = 1.0
BACKGROUND_LEVEL = 0.0
_RESPAWN_ATTEMPTS = 32


class EnvStateError(RuntimeError):
    """Raised when the environment is used outside a live episode."""

    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray  # (2, H, W): previous frame, current frame
    action: int
    reward: float
    done: bool


@dataclass(frozen=True)
class GroundTruthMasks:
    masks: np.ndarray  # (num_sprites, H, W) bool, visible pixels of each sprite
    translations: np.ndarray  # (num_sprites, 2) as (dx, dy) pixels
    respawned: np.ndarray  # (num_sprites,) bool, respawned during the last step
    avatar_mask: np.ndarray  # (H, W) bool

    @property
    def visible(self) -> np.ndarray:
        return self.masks.reshape(len(self.masks), -1).any(axis=1)


def sprite_stamp(shape: str, size: int) -> np.ndarray:
    """Boolean footprint of a sprite inside its size x size bounding box."""
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    centers = np.arange(size) + 0.5 - size / 2.0
    radius = size / 2.0
    return centers[:, None] ** 2 + centers[None, :] ** 2 <= radius**2


def sprite_levels(num_sprites: int) -> np.ndarray:
    """Distinct constant gray levels in [0.3, 0.9] for the sprites."""
    if num_sprites == 0:
        return np.zeros(0, dtype=np.float32)
    return np.linspace(0.9, 0.3, num_sprites).astype(np.float32)


def _stamp(label: np.ndarray, stamp: np.ndarray, top: int, left: int, value: int):
    h, w = stamp.shape
    rows, cols = label.shape
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + h, rows), min(left + w, cols)
    if r0 >= r1 or c0 >= c1:
        return
    sub = stamp[r0 - top : r1 - top, c0 - left : c1 - left]
    label[r0:r1, c0:c1][sub] = value


def _outline(size: int) -> np.ndarray:
    stamp = np.zeros((size, size), dtype=bool)
    stamp[0, :] = stamp[-1, :] = stamp[:, 0] = stamp[:, -1] = True
    return stamp


class SpriteWorld:
    """Single Sprite World instance; strictly single-threaded."""

    def __init__(self, config: EnvConfig | Mapping[str, Any] | None = None) -> None:
        self.config = validate_model(EnvConfig, config or {}, prefix="env")
        cfg = self.config
        self.frame_size = cfg.frame_size
        self.num_actions = NUM_ACTIONS

        shapes = cfg.sprite_shapes or tuple(
            "square" if k % 2 == 0 else "circle" for k in range(cfg.num_sprites)
        )
        self.shapes = tuple(shapes)
        self._stamps = [sprite_stamp(s, cfg.sprite_size_px) for s in self.shapes]
        self._avatar_stamp = _outline(cfg.avatar_size_px)
        # label -1 (background) indexes the last entry
        self._levels = np.concatenate(
            [sprite_levels(cfg.num_sprites), [AVATAR_LEVEL, BACKGROUND_LEVEL]]
        ).astype(np.float32)
        self._scroll = np.asarray(cfg.camera_scroll_px, dtype=np.float64)

        self._rng: Optional[np.random.Generator] = None
        self._positions = np.zeros((cfg.num_sprites, 2))  # (x, y) top-left
        self._velocities = np.zeros((cfg.num_sprites, 2))
        self._respawned = np.zeros(cfg.num_sprites, dtype=bool)
        self._avatar = np.zeros(2, dtype=np.int64)  # (row, col) top-left
        self._label: Optional[np.ndarray] = None
        self._frame: Optional[np.ndarray] = None
        self._previous: Optional[np.ndarray] = None
        self._t = 0
        self._done = False

    # episode lifecycle

    def reset(self, seed: Optional[int] = None) -> np.ndarray:
        """Start an episode and return its first frame.

        Args:
            seed: Episode seed; defaults to ``config.seed``

        Returns:
            First rendered frame, float32 (H, W)
        """
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        self._rng = np.random.default_rng(seed)

        if cfg.sprite_velocities is not None:
            self._velocities = np.asarray(cfg.sprite_velocities, dtype=np.float64)
        else:
            self._velocities = self._rng.uniform(
                -cfg.sprite_speed_px, cfg.sprite_speed_px, size=(cfg.num_sprites, 2)
            )
        high = self.frame_size - cfg.sprite_size_px
        self._positions = self._rng.integers(
            0, high + 1, size=(cfg.num_sprites, 2)
        ).astype(np.float64)
        avatar_high = self.frame_size - cfg.avatar_size_px
        self._avatar = self._rng.integers(0, avatar_high + 1, size=2)
        self._respawned = np.zeros(cfg.num_sprites, dtype=bool)

        self._t = 0
        self._done = False
        self._render()
        self._previous = self._frame.copy()
        return self._frame.copy()

    def step(self, action: int) -> Transition:
        """Advance one step.

        Args:
            action: Index into ``ACTIONS``

        Returns:
            Transition whose obs is (previous frame, current frame)

        Raises:
            EnvStateError: If called before reset or after the episode ended
            ValueError: If the action is out of range
        """
        if self._rng is None:
            raise EnvStateError("step() called before reset()")
        if self._done:
            raise EnvStateError("episode finished; call reset() first")
        action = int(action)
        if not 0 <= action < NUM_ACTIONS:
            raise ValueError(f"action {action} out of range [0, {NUM_ACTIONS})")

        cfg = self.config
        self._previous = self._frame
        span = self.frame_size + cfg.sprite_size_px
        moved = self._positions + self._velocities + self._scroll
        self._positions = np.mod(moved + cfg.sprite_size_px, span) - cfg.sprite_size_px

        avatar_high = self.frame_size - cfg.avatar_size_px
        self._avatar = np.clip(
            self._avatar + _ACTION_DELTAS[action] * cfg.avatar_speed_px, 0, avatar_high
        )

        hits = self._overlapping_sprites()
        reward = 0.0
        if hits.any():
            reward = 1.0 if cfg.reward_mode == "catch" else -1.0
        self._respawned = hits
        for k in np.flatnonzero(hits):
            self._respawn(k)

        self._render()
        self._t += 1
        self._done = self._t >= cfg.episode_len
        obs = np.stack([self._previous, self._frame])
        return Transition(obs=obs, action=action, reward=reward, done=self._done)

    def ground_truth(self) -> GroundTruthMasks:
        """Masks and true translations of every sprite in the current frame."""
        if self._label is None:
            raise EnvStateError("ground_truth() called before reset()")
        n = self.config.num_sprites
        masks = self._label[None, :, :] == np.arange(n)[:, None, None]
        translations = self._velocities + self._scroll[None, :]
        return GroundTruthMasks(
            masks=masks,
            translations=translations.reshape(n, 2),
            respawned=self._respawned.copy(),
            avatar_mask=self._label == n,
        )

    # inspection helpers

    @property
    def frame(self) -> np.ndarray:
        if self._frame is None:
            raise EnvStateError("no frame rendered yet; call reset()")
        return self._frame.copy()

    @property
    def t(self) -> int:
        return self._t

    def sprite_positions(self) -> np.ndarray:
        """Rendered (row, col) top-left of every sprite."""
        return np.rint(self._positions[:, ::-1]).astype(np.int64)

    def place_avatar(self, row: int, col: int) -> None:
        """Teleport the avatar (clamped to the frame) and re-render."""
        if self._rng is None:
            raise EnvStateError("place_avatar() called before reset()")
        high = self.frame_size - self.config.avatar_size_px
        self._avatar = np.clip(np.array([row, col], dtype=np.int64), 0, high)
        self._render()

    # internals

    def _sprite_topleft(self, k: int) -> tuple[int, int]:
        x, y = np.rint(self._positions[k])
        return int(y), int(x)

    def _avatar_region(self) -> np.ndarray:
        region = np.zeros((self.frame_size, self.frame_size), dtype=bool)
        size = self.config.avatar_size_px
        r, c = self._avatar
        region[r : r + size, c : c + size] = True
        return region

    def _sprite_region(self, k: int) -> np.ndarray:
        region = np.zeros((self.frame_size, self.frame_size), dtype=np.int8)
        top, left = self._sprite_topleft(k)
        _stamp(region, self._stamps[k], top, left, 1)
        return region.astype(bool)

    def _overlapping_sprites(self) -> np.ndarray:
        avatar = self._avatar_region()
        return np.array(
            [(self._sprite_region(k) & avatar).any() for k in range(self.config.num_sprites)],
            dtype=bool,
        )

    def _respawn(self, k: int) -> None:
        cfg = self.config
        high = self.frame_size - cfg.sprite_size_px
        avatar = self._avatar_region()
        for _ in range(_RESPAWN_ATTEMPTS):
            self._positions[k] = self._rng.integers(0, high + 1, size=2)
            if not (self._sprite_region(k) & avatar).any():
                return
        logger.debug(f"Sprite {k} respawned overlapping the avatar after {_RESPAWN_ATTEMPTS} draws")

    def _render(self) -> None:
        label = np.full((self.frame_size, self.frame_size), -1, dtype=np.int16)
        for k in range(self.config.num_sprites):
            top, left = self._sprite_topleft(k)
            _stamp(label, self._stamps[k], top, left, k)
        r, c = self._avatar
        _stamp(label, self._avatar_stamp, int(r), int(c), self.config.num_sprites)
        self._label = label
        self._frame = self._levels[label]


def collect_random(config: EnvConfig, seed: int, n_frames: int, path):
    """Record a random-policy dataset; see ``morel.dataset.collect_random``."""
    from .dataset import collect_random as _collect

    return _collect(config, seed, n_frames, path)
