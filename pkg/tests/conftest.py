"""共通フィクスチャ

core / utils をトップレベルパッケージとして import するため、リポジトリのルートを
sys.path に入れてからテストを集める。
"""
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from core.trace import SizeProfile, synthesize_transformer_trace  # noqa: E402


@pytest.fixture
def make_fixed_trace():
    """同じサイズのパラメータだけを持つ合成トレースを作る（1B あたり 1µs の計算）"""

    def _make(layers: int, tensors_per_layer: int = 1, size: int = 512, iterations: int = 1):
        return synthesize_transformer_trace(layers, tensors_per_layer, SizeProfile.fixed(size), 1, 0,
                                            iterations=iterations)

    return _make
