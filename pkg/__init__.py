"""
tencache-sim パッケージ
GPU/CPU/NVMe テンソルキャッシュの離散イベントシミュレータ

大規模モデル学習時のパラメータ・オプティマイザ状態のオフロード方針を
決定的に再生し、ヒット率・待ち時間・利用率・模擬学習時間を比較します。
"""

__version__ = "0.1.0"
__description__ = "GPU/CPU/NVMe テンソルキャッシュの離散イベントシミュレータ"
