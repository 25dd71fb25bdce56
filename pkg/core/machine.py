"""
tencache-sim ハードウェアモデル

GPU/CPU/NVMe の容量、リンク帯域、ピン留め/ページング可能メモリの区別と
転送時間の計算を提供します。帯域は10進GB/s (10^9 B/s) で扱います。

主要クラス:
    - Location: 配置先ティア
    - MemoryClass: CPUメモリ種別（Pinned / Pageable）
    - LinkSpec: 有向リンクの帯域
    - MachineConfig: マシン構成（不変）

機能:
    - transfer_time: 有理数演算による転送時間(µs)
    - default_machine: 既定構成（L40S 48GB / 256GB DRAM）
    - load_machine / save_machine: JSON構成ファイルの読み書き
"""
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from core.errors import ConfigError, UnknownLink

logger = logging.getLogger(__name__)

GB = 10**9


class Location(str, Enum):
    GPU = "gpu"
    CPU = "cpu"
    NVME = "nvme"


class MemoryClass(str, Enum):
    PINNED = "pinned"
    PAGEABLE = "pageable"


Link = Tuple[Location, Location]

CPU_TO_GPU: Link = (Location.CPU, Location.GPU)
GPU_TO_CPU: Link = (Location.GPU, Location.CPU)
CPU_TO_NVME: Link = (Location.CPU, Location.NVME)
NVME_TO_CPU: Link = (Location.NVME, Location.CPU)
NVME_TO_GPU: Link = (Location.NVME, Location.GPU)
GPU_TO_NVME: Link = (Location.GPU, Location.NVME)

REQUIRED_LINKS = (CPU_TO_GPU, GPU_TO_CPU, CPU_TO_NVME, NVME_TO_CPU)

# GPU と NVMe の間は CPU ステージングバッファ経由の2区間
STAGED_LEGS: Dict[Link, Tuple[Link, Link]] = {
    NVME_TO_GPU: (NVME_TO_CPU, CPU_TO_GPU),
    GPU_TO_NVME: (GPU_TO_CPU, CPU_TO_NVME),
}


def to_fraction(value: Union[int, float, str, Fraction]) -> Fraction:
    """数値/文字列を Fraction に変換（floatは10進表記経由で厳密化）"""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ConfigError(f"数値ではありません: {value!r}")
    if isinstance(value, float):
        return Fraction(str(value))
    try:
        return Fraction(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"有理数として解釈できません: {value!r}") from e


def link_name(link: Link) -> str:
    return f"{link[0].value}->{link[1].value}"


@dataclass(frozen=True)
class LinkSpec:
    src: Location
    dst: Location
    bandwidth_gbps: Fraction

    def __post_init__(self):
        if self.src == self.dst:
            raise ConfigError(f"links: 始点と終点が同じです ({self.src.value})")
        if self.bandwidth_gbps <= 0:
            raise ConfigError(f"links.gbps: 帯域は正である必要があります ({link_name(self.key)})")

    @property
    def key(self) -> Link:
        return (self.src, self.dst)


@dataclass(frozen=True)
class MachineConfig:
    """マシン構成（構築後は不変、実行間で共有可能）"""

    gpu_capacity_bytes: int
    cpu_capacity_bytes: int
    links: Tuple[LinkSpec, ...]
    cpu_memory_class: MemoryClass = MemoryClass.PINNED
    pinned_bandwidth_overrides: Dict[Link, Fraction] = field(default_factory=dict)

    def __post_init__(self):
        if self.gpu_capacity_bytes <= 0:
            raise ConfigError("gpu_capacity_bytes: 正の値が必要です")
        if self.cpu_capacity_bytes <= 0:
            raise ConfigError("cpu_capacity_bytes: 正の値が必要です")
        present = {spec.key for spec in self.links}
        missing = [link_name(k) for k in REQUIRED_LINKS if k not in present]
        if missing:
            raise ConfigError(f"links: 必須リンクがありません: {', '.join(missing)}")

    def link(self, key: Link) -> LinkSpec:
        for spec in self.links:
            if spec.key == key:
                return spec
        raise UnknownLink(f"未定義のリンク: {link_name(key)}")

    def bandwidth(self, key: Link) -> Fraction:
        """実効帯域（Pinned時はCPUを含むリンクに上書き値を適用）"""
        base = self.link(key).bandwidth_gbps
        if self.cpu_memory_class is MemoryClass.PINNED and Location.CPU in key:
            return self.pinned_bandwidth_overrides.get(key, base)
        return base

    def with_overrides(self, **changes: Any) -> "MachineConfig":
        return replace(self, **changes)


def transfer_legs(src: Location, dst: Location) -> Tuple[Link, ...]:
    """実際に使うリンクの列（GPU↔NVMe は2区間）"""
    return STAGED_LEGS.get((src, dst), ((src, dst),))


def transfer_time(cfg: MachineConfig, src: Location, dst: Location, size_bytes: int) -> Fraction:
    """size_bytes を src→dst に転送する時間(µs)

    NVMe→GPU はCPUステージング経由の合成経路（NVMe→CPU + CPU→GPU）。
    """
    if size_bytes < 0:
        raise ConfigError(f"size_bytes: 負の値は不可 ({size_bytes})")
    if (src, dst) in STAGED_LEGS:
        return sum((transfer_time(cfg, a, b, size_bytes) for a, b in STAGED_LEGS[(src, dst)]), Fraction(0))
    gbps = cfg.bandwidth((src, dst))
    # bytes / (gbps * 1e9 B/s) * 1e6 µs/s
    return Fraction(size_bytes) / (gbps * 1000)


def default_machine() -> MachineConfig:
    """既定構成: リンク帯域は実測表の値、Pinned時は上書き帯域を使用"""
    return MachineConfig(
        gpu_capacity_bytes=48 * GB,
        cpu_capacity_bytes=256 * GB,
        links=(
            LinkSpec(Location.CPU, Location.GPU, Fraction("10.36")),
            LinkSpec(Location.GPU, Location.CPU, Fraction("9.51")),
            LinkSpec(Location.CPU, Location.NVME, Fraction("0.73")),
            LinkSpec(Location.NVME, Location.CPU, Fraction("2.36")),
        ),
        cpu_memory_class=MemoryClass.PINNED,
        pinned_bandwidth_overrides={
            CPU_TO_GPU: Fraction("24.74"),
            GPU_TO_CPU: Fraction("25.91"),
        },
    )


def _parse_location(value: Any, field_name: str) -> Location:
    try:
        return Location(str(value).lower())
    except ValueError as e:
        raise ConfigError(f"{field_name}: 不明なロケーション {value!r}") from e


def machine_from_dict(data: Dict[str, Any], base: Optional[MachineConfig] = None) -> MachineConfig:
    """辞書からマシン構成を作成（欠けたキーは base / default_machine で補完）"""
    base = base or default_machine()
    known = {"gpu_capacity_bytes", "cpu_capacity_bytes", "links", "cpu_memory_class", "pinned_overrides"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"マシン構成に不明なキー: {', '.join(unknown)}")

    links = {spec.key: spec for spec in base.links}
    for i, entry in enumerate(data.get("links", [])):
        try:
            src = _parse_location(entry["src"], f"links[{i}].src")
            dst = _parse_location(entry["dst"], f"links[{i}].dst")
            gbps = to_fraction(entry["gbps"])
        except KeyError as e:
            raise ConfigError(f"links[{i}]: キー {e.args[0]} がありません") from e
        links[(src, dst)] = LinkSpec(src, dst, gbps)

    overrides = dict(base.pinned_bandwidth_overrides)
    for i, entry in enumerate(data.get("pinned_overrides", [])):
        try:
            key = (_parse_location(entry["src"], f"pinned_overrides[{i}].src"),
                   _parse_location(entry["dst"], f"pinned_overrides[{i}].dst"))
            gbps = to_fraction(entry["gbps"])
        except KeyError as e:
            raise ConfigError(f"pinned_overrides[{i}]: キー {e.args[0]} がありません") from e
        if gbps <= 0:
            raise ConfigError(f"pinned_overrides[{i}].gbps: 正の値が必要です")
        overrides[key] = gbps

    memory_class = base.cpu_memory_class
    if "cpu_memory_class" in data:
        try:
            memory_class = MemoryClass(str(data["cpu_memory_class"]).lower())
        except ValueError as e:
            raise ConfigError(f"cpu_memory_class: 不明な値 {data['cpu_memory_class']!r}") from e

    def _capacity(key: str, fallback: int) -> int:
        value = data.get(key, fallback)
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: 整数のバイト数が必要です")
        return value

    return MachineConfig(
        gpu_capacity_bytes=_capacity("gpu_capacity_bytes", base.gpu_capacity_bytes),
        cpu_capacity_bytes=_capacity("cpu_capacity_bytes", base.cpu_capacity_bytes),
        links=tuple(links[k] for k in sorted(links, key=link_name)),
        cpu_memory_class=memory_class,
        pinned_bandwidth_overrides=overrides,
    )


def machine_to_dict(cfg: MachineConfig) -> Dict[str, Any]:
    def _num(value: Fraction) -> Any:
        return value.numerator if value.denominator == 1 else float(value)

    return {
        "gpu_capacity_bytes": cfg.gpu_capacity_bytes,
        "cpu_capacity_bytes": cfg.cpu_capacity_bytes,
        "links": [{"src": s.src.value, "dst": s.dst.value, "gbps": _num(s.bandwidth_gbps)}
                  for s in cfg.links],
        "cpu_memory_class": cfg.cpu_memory_class.value,
        "pinned_overrides": [{"src": k[0].value, "dst": k[1].value, "gbps": _num(v)}
                             for k, v in sorted(cfg.pinned_bandwidth_overrides.items(),
                                                key=lambda kv: link_name(kv[0]))],
    }


def load_machine(path: Union[str, Path]) -> MachineConfig:
    """JSONのマシン構成ファイルを読み込む"""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"machine: ファイルが見つかりません: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"machine: JSONとして解釈できません: {path} ({e})") from e
    if not isinstance(data, dict):
        raise ConfigError(f"machine: オブジェクト形式である必要があります: {path}")
    cfg = machine_from_dict(data)
    logger.info(f"マシン構成をロードしました: {path}")
    return cfg


def save_machine(cfg: MachineConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(machine_to_dict(cfg), f, indent=2)
    return path
