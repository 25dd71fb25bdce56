"""
tencache-sim コアモジュール
トレース・マシンモデル・キャッシュ方針・シミュレーションエンジン・設定管理を提供
"""

from .config import ConfigManager, SimConfig
from .engine import Scenario, SimReport, run, run_reference, sized_machine, sweep
from .machine import Location, MachineConfig, MemoryClass, default_machine
from .policy import PolicyKind
from .trace import ExecutionTrace, SizeProfile, synthesize_transformer_trace

__all__ = [
    'ConfigManager',
    'SimConfig',
    'Scenario',
    'SimReport',
    'run',
    'run_reference',
    'sized_machine',
    'sweep',
    'Location',
    'MachineConfig',
    'MemoryClass',
    'default_machine',
    'PolicyKind',
    'ExecutionTrace',
    'SizeProfile',
    'synthesize_transformer_trace',
]
