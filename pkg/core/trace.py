"""
tencache-sim 実行トレースモジュール

学習1イテレーション分の実行トレース（テンソル定義と計算ステップ列）を定義し、
行区切りJSONファイルとの読み書き、不変条件の検証、Transformer風トレースの合成を行います。

主要クラス:
    - TensorKind / Phase: テンソル種別（FP16パラメータ / FP32オプティマイザ状態）とフェーズ
    - TensorDescriptor / TraceStep / ExecutionTrace: トレースのデータモデル（不変）
    - SizeProfile: 合成時のテンソルサイズ生成規則
    - TensorCensus: サイズ別テンソル数

機能:
    - load_trace / save_trace / validate_trace
    - synthesize_transformer_trace: 順伝播 1..L、逆伝播 L..1 の合成トレース
    - tensor_census: 種別ごとのサイズ集計
    - scale_trace: 計算時間のスケーリング（バッチサイズ掃引用）

ファイル形式:
    1行目 {"v": 1, "iterations": N}（iterations は省略可）
    {"t": {"id", "size", "kind": "p16"|"o32", "layer"}}
    {"s": {"i", "phase": "f"|"b"|"o", "ids": [...], "us"}}
"""
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import TraceParseError, TraceValidationError
from core.machine import to_fraction

logger = logging.getLogger(__name__)

TRACE_VERSION = 1
STATE_SIZE_FACTOR = 6  # FP32 パラメータ + モメンタム + 分散 = 12B/要素、FP16 は 2B/要素
OPTIMIZER_SHARE = Fraction(3, 17)  # 最適化ステップ ≈ イテレーションの15%


class TensorKind(str, Enum):
    PARAM_FP16 = "p16"
    OPT_STATE_FP32 = "o32"


class Phase(str, Enum):
    FORWARD = "f"
    BACKWARD = "b"
    OPTIMIZER = "o"


PHASE_RANK = {Phase.FORWARD: 0, Phase.BACKWARD: 1, Phase.OPTIMIZER: 2}


@dataclass(frozen=True)
class TensorDescriptor:
    id: int
    size_bytes: int
    kind: TensorKind
    layer: int


@dataclass(frozen=True)
class TraceStep:
    step_index: int
    phase: Phase
    tensor_ids: Tuple[int, ...]
    compute_us: Fraction


@dataclass(frozen=True)
class TensorCensus:
    """サイズ → テンソル数"""

    entries: Dict[int, int] = field(default_factory=dict)

    @property
    def total_count(self) -> int:
        return sum(self.entries.values())

    @property
    def total_bytes(self) -> int:
        return sum(size * count for size, count in self.entries.items())

    def sizes(self) -> List[int]:
        return sorted(self.entries)


@dataclass(frozen=True)
class ExecutionTrace:
    tensors: Tuple[TensorDescriptor, ...]
    steps: Tuple[TraceStep, ...]
    iterations: int = 1

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {t.id: t for t in self.tensors})

    def tensor(self, tensor_id: int) -> TensorDescriptor:
        return self._by_id[tensor_id]  # type: ignore[attr-defined]

    def has_tensor(self, tensor_id: int) -> bool:
        return tensor_id in self._by_id  # type: ignore[attr-defined]

    def size_of(self, tensor_id: int) -> int:
        return self.tensor(tensor_id).size_bytes

    def tensors_of(self, kind: TensorKind) -> List[TensorDescriptor]:
        return [t for t in self.tensors if t.kind is kind]

    def steps_of(self, *phases: Phase) -> List[TraceStep]:
        return [s for s in self.steps if s.phase in phases]

    def param_ids(self, step: TraceStep) -> List[int]:
        return [i for i in step.tensor_ids if self.tensor(i).kind is TensorKind.PARAM_FP16]

    def state_ids(self, step: TraceStep) -> List[int]:
        return [i for i in step.tensor_ids if self.tensor(i).kind is TensorKind.OPT_STATE_FP32]

    def optimizer_pairs(self) -> Dict[int, int]:
        """パラメータID → 対応するオプティマイザ状態ID（最適化ステップの共起から導出）"""
        pairs: Dict[int, int] = {}
        for step in self.steps_of(Phase.OPTIMIZER):
            states = self.state_ids(step)
            for pid in self.param_ids(step):
                if states:
                    pairs[pid] = states[0]
        return pairs

    def iteration_compute_us(self) -> Fraction:
        return sum((s.compute_us for s in self.steps), Fraction(0))

    def param_bytes(self) -> int:
        return sum(t.size_bytes for t in self.tensors_of(TensorKind.PARAM_FP16))

    def state_bytes(self) -> int:
        return sum(t.size_bytes for t in self.tensors_of(TensorKind.OPT_STATE_FP32))


@dataclass(frozen=True)
class SizeProfile:
    """合成トレースのサイズ生成規則

    mode:
        fixed  - 全テンソル sizes[0]
        cycle  - sizes を順に繰り返す
        random - rng で sizes から一様に選択
    """

    mode: str = "fixed"
    sizes: Tuple[int, ...] = (512,)

    def __post_init__(self):
        if self.mode not in ("fixed", "cycle", "random"):
            raise ValueError(f"size_profile.mode: 不明なモード {self.mode!r}")
        if not self.sizes or any(s <= 0 for s in self.sizes):
            raise ValueError("size_profile.sizes: 正のサイズが1つ以上必要です")

    @classmethod
    def fixed(cls, size: int) -> "SizeProfile":
        return cls("fixed", (size,))

    @classmethod
    def cycle(cls, sizes: Sequence[int]) -> "SizeProfile":
        return cls("cycle", tuple(sizes))

    @classmethod
    def random(cls, sizes: Sequence[int]) -> "SizeProfile":
        return cls("random", tuple(sizes))

    def generate(self, count: int, rng: np.random.Generator) -> List[int]:
        if self.mode == "fixed":
            return [self.sizes[0]] * count
        if self.mode == "cycle":
            return [self.sizes[i % len(self.sizes)] for i in range(count)]
        picks = rng.integers(0, len(self.sizes), size=count)
        return [self.sizes[int(i)] for i in picks]


# ---------------------------------------------------------------- 検証

def collect_violations(tensors: Sequence[TensorDescriptor], steps: Sequence[TraceStep],
                       iterations: int = 1) -> List[str]:
    """トレース不変条件の違反をすべて列挙する"""
    violations: List[str] = []
    by_id: Dict[int, TensorDescriptor] = {}
    for t in tensors:
        if t.id in by_id:
            violations.append(f"テンソルID {t.id} が重複しています")
        if t.id < 0:
            violations.append(f"テンソルID {t.id} が負です")
        if t.size_bytes <= 0:
            violations.append(f"テンソル {t.id}: size は正である必要があります")
        if t.layer < 0:
            violations.append(f"テンソル {t.id}: layer は非負である必要があります")
        by_id[t.id] = t

    if iterations < 1:
        violations.append("iterations は1以上である必要があります")

    last_rank = -1
    state_of_param: Dict[int, int] = {}
    forward_layers: List[int] = []
    backward_layers: List[int] = []
    for pos, step in enumerate(steps):
        where = f"ステップ {step.step_index}"
        if step.step_index != pos:
            violations.append(f"{where}: step_index が位置 {pos} と一致しません")
        if not step.tensor_ids:
            violations.append(f"{where}: tensor_ids が空です")
        if step.compute_us < 0:
            violations.append(f"{where}: us は非負である必要があります")
        rank = PHASE_RANK[step.phase]
        if rank < last_rank:
            violations.append(f"{where}: フェーズ順序違反（{step.phase.value} が後続フェーズの後にあります）")
        last_rank = max(last_rank, rank)

        dangling = [i for i in step.tensor_ids if i not in by_id]
        for i in dangling:
            violations.append(f"{where}: 未定義のテンソルID {i}")
        known = [by_id[i] for i in step.tensor_ids if i in by_id]

        if step.phase in (Phase.FORWARD, Phase.BACKWARD):
            for t in known:
                if t.kind is not TensorKind.PARAM_FP16:
                    violations.append(f"{where}: {step.phase.name} ステップが FP16 パラメータ以外 ({t.id}) を参照しています")
            layers = forward_layers if step.phase is Phase.FORWARD else backward_layers
            for t in known:
                if not layers or layers[-1] != t.layer:
                    layers.append(t.layer)
        else:
            states = [t for t in known if t.kind is TensorKind.OPT_STATE_FP32]
            params = [t for t in known if t.kind is TensorKind.PARAM_FP16]
            if len(states) != 1 or len(params) > 1:
                violations.append(f"{where}: 最適化ステップは状態1つとパラメータ高々1つを参照する必要があります")
            elif params:
                pid, sid = params[0].id, states[0].id
                if state_of_param.setdefault(pid, sid) != sid:
                    violations.append(f"{where}: パラメータ {pid} が複数の状態と対応しています")

    if backward_layers and backward_layers != list(reversed(forward_layers)):
        violations.append("逆伝播のレイヤ順序が順伝播の逆順になっていません")
    paired_states = Counter(state_of_param.values())
    for sid, n in paired_states.items():
        if n > 1:
            violations.append(f"状態 {sid} が複数のパラメータと対応しています")
    return violations


def validate_trace(trace: ExecutionTrace) -> None:
    violations = collect_violations(trace.tensors, trace.steps, trace.iterations)
    if violations:
        raise TraceValidationError(violations)


# ---------------------------------------------------------------- 入出力

def _format_us(value: Fraction) -> Union[int, str]:
    return value.numerator if value.denominator == 1 else f"{value.numerator}/{value.denominator}"


def _parse_us(value: Any, line: int) -> Fraction:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise TraceParseError(f"us が数値ではありません: {value!r}", line)
    try:
        return to_fraction(value)
    except Exception as e:
        raise TraceParseError(f"us を解釈できません: {value!r}", line) from e


def _expect_keys(record: Dict[str, Any], required: Sequence[str], line: int, what: str) -> None:
    if not isinstance(record, dict):
        raise TraceParseError(f"{what} レコードはオブジェクトである必要があります", line)
    unknown = sorted(set(record) - set(required))
    if unknown:
        raise TraceParseError(f"{what} レコードに不明なキー: {', '.join(unknown)}", line)
    missing = [k for k in required if k not in record]
    if missing:
        raise TraceParseError(f"{what} レコードにキーがありません: {', '.join(missing)}", line)


def _expect_int(value: Any, line: int, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceParseError(f"{what} は整数である必要があります: {value!r}", line)
    return value


def parse_trace_lines(lines: Sequence[str]) -> ExecutionTrace:
    """行区切りJSONを解析して検証済みトレースを返す"""
    tensors: List[TensorDescriptor] = []
    steps: List[TraceStep] = []
    iterations = 1
    header_seen = False
    for lineno, raw in enumerate(lines, start=1):
        text = raw.strip()
        if not text:
            continue
        try:
            record = json.loads(text)
        except json.JSONDecodeError as e:
            raise TraceParseError(f"JSONとして解釈できません ({e.msg})", lineno) from e
        if not isinstance(record, dict) or len(record) == 0:
            raise TraceParseError("レコードはオブジェクトである必要があります", lineno)

        if not header_seen:
            if "v" not in record:
                raise TraceParseError("1行目にヘッダ {\"v\": 1} が必要です", lineno)
            unknown = sorted(set(record) - {"v", "iterations"})
            if unknown:
                raise TraceParseError(f"ヘッダに不明なキー: {', '.join(unknown)}", lineno)
            if record["v"] != TRACE_VERSION:
                raise TraceParseError(f"未対応のバージョン: {record['v']!r}", lineno)
            iterations = _expect_int(record.get("iterations", 1), lineno, "iterations")
            header_seen = True
            continue

        if len(record) != 1 or next(iter(record)) not in ("t", "s"):
            raise TraceParseError(f"不明なレコード種別: {sorted(record)}", lineno)
        if "t" in record:
            body = record["t"]
            _expect_keys(body, ("id", "size", "kind", "layer"), lineno, "t")
            try:
                kind = TensorKind(body["kind"])
            except ValueError as e:
                raise TraceParseError(f"不明な kind: {body['kind']!r}", lineno) from e
            tensors.append(TensorDescriptor(
                id=_expect_int(body["id"], lineno, "id"),
                size_bytes=_expect_int(body["size"], lineno, "size"),
                kind=kind,
                layer=_expect_int(body["layer"], lineno, "layer"),
            ))
        else:
            body = record["s"]
            _expect_keys(body, ("i", "phase", "ids", "us"), lineno, "s")
            try:
                phase = Phase(body["phase"])
            except ValueError as e:
                raise TraceParseError(f"不明な phase: {body['phase']!r}", lineno) from e
            if not isinstance(body["ids"], list):
                raise TraceParseError("ids は配列である必要があります", lineno)
            steps.append(TraceStep(
                step_index=_expect_int(body["i"], lineno, "i"),
                phase=phase,
                tensor_ids=tuple(_expect_int(i, lineno, "ids[]") for i in body["ids"]),
                compute_us=_parse_us(body["us"], lineno),
            ))

    if not header_seen:
        raise TraceParseError("ヘッダ {\"v\": 1} がありません", 1)
    trace = ExecutionTrace(tuple(tensors), tuple(steps), iterations)
    validate_trace(trace)
    return trace


def load_trace(path: Union[str, Path]) -> ExecutionTrace:
    """トレースファイルを読み込み検証する"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    trace = parse_trace_lines(lines)
    logger.info(f"トレースをロードしました: {path} (テンソル {len(trace.tensors)} / ステップ {len(trace.steps)})")
    return trace


def trace_to_lines(trace: ExecutionTrace) -> List[str]:
    header: Dict[str, Any] = {"v": TRACE_VERSION}
    if trace.iterations != 1:
        header["iterations"] = trace.iterations
    lines = [json.dumps(header)]
    for t in trace.tensors:
        lines.append(json.dumps({"t": {"id": t.id, "size": t.size_bytes,
                                       "kind": t.kind.value, "layer": t.layer}}))
    for s in trace.steps:
        lines.append(json.dumps({"s": {"i": s.step_index, "phase": s.phase.value,
                                       "ids": list(s.tensor_ids), "us": _format_us(s.compute_us)}}))
    return lines


def save_trace(trace: ExecutionTrace, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(trace_to_lines(trace)) + "\n")
    return path


# ---------------------------------------------------------------- 合成・集計

def synthesize_transformer_trace(layers: int, tensors_per_layer: int, size_profile: SizeProfile,
                                 compute_us_per_byte: Union[Fraction, int, str], seed: int,
                                 iterations: int = 1, backward_factor: Union[Fraction, int, str] = 1,
                                 include_optimizer: bool = True) -> ExecutionTrace:
    """Transformer風の合成トレース

    パラメータIDは 1..L·k（レイヤ順）、対応する状態IDは p + L·k。
    順伝播はレイヤ 1..L、逆伝播は L..1（レイヤ内のテンソル順も逆）。
    """
    if layers < 1 or tensors_per_layer < 1:
        raise ValueError("layers と tensors_per_layer は1以上である必要があります")
    cpb = to_fraction(compute_us_per_byte)
    bwd = to_fraction(backward_factor)
    rng = np.random.default_rng(seed)
    n = layers * tensors_per_layer
    sizes = size_profile.generate(n, rng)

    tensors: List[TensorDescriptor] = []
    layer_ids: List[List[int]] = []
    for layer in range(layers):
        ids = []
        for j in range(tensors_per_layer):
            pid = layer * tensors_per_layer + j + 1
            tensors.append(TensorDescriptor(pid, int(sizes[pid - 1]), TensorKind.PARAM_FP16, layer))
            ids.append(pid)
        layer_ids.append(ids)
    if include_optimizer:
        for pid in range(1, n + 1):
            tensors.append(TensorDescriptor(pid + n, STATE_SIZE_FACTOR * int(sizes[pid - 1]),
                                            TensorKind.OPT_STATE_FP32, (pid - 1) // tensors_per_layer))

    def _bytes(ids: Sequence[int]) -> int:
        return sum(int(sizes[i - 1]) for i in ids)

    steps: List[TraceStep] = []
    for ids in layer_ids:
        steps.append(TraceStep(len(steps), Phase.FORWARD, tuple(ids), cpb * _bytes(ids)))
    for ids in reversed(layer_ids):
        steps.append(TraceStep(len(steps), Phase.BACKWARD, tuple(reversed(ids)), cpb * bwd * _bytes(ids)))
    if include_optimizer:
        fb_total = sum((s.compute_us for s in steps), Fraction(0))
        opt_total = fb_total * OPTIMIZER_SHARE
        total_params = sum(int(s) for s in sizes)
        for pid in range(1, n + 1):
            share = Fraction(int(sizes[pid - 1]), total_params)
            steps.append(TraceStep(len(steps), Phase.OPTIMIZER, (pid + n, pid), opt_total * share))

    trace = ExecutionTrace(tuple(tensors), tuple(steps), iterations)
    validate_trace(trace)
    logger.debug(f"合成トレース: layers={layers} k={tensors_per_layer} seed={seed} テンソル={len(tensors)}")
    return trace


def tensor_census(trace: ExecutionTrace, kind: TensorKind) -> TensorCensus:
    """指定種別の相異なるテンソルのサイズ別個数"""
    counts = Counter(t.size_bytes for t in trace.tensors if t.kind is kind)
    return TensorCensus(dict(sorted(counts.items())))


def scale_trace(trace: ExecutionTrace, factor: Union[Fraction, int, str]) -> ExecutionTrace:
    """全ステップの compute_us を factor 倍したトレース"""
    factor = to_fraction(factor)
    if factor == 1:
        return trace
    steps = tuple(replace(s, compute_us=s.compute_us * factor) for s in trace.steps)
    return ExecutionTrace(trace.tensors, steps, trace.iterations)


def with_optimizer_rate(trace: ExecutionTrace, us_per_byte: Optional[Union[Fraction, str]]) -> ExecutionTrace:
    """最適化ステップの所要時間を状態バイト数 × us_per_byte に置き換える"""
    if us_per_byte is None:
        return trace
    rate = to_fraction(us_per_byte)
    steps = []
    for s in trace.steps:
        if s.phase is Phase.OPTIMIZER:
            state_bytes = sum(trace.size_of(i) for i in trace.state_ids(s))
            s = replace(s, compute_us=rate * state_bytes)
        steps.append(s)
    return ExecutionTrace(trace.tensors, tuple(steps), trace.iterations)
