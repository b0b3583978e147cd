"""
advids - 基于 GAN 判别器门控与 CNN 的两阶段 IoT 入侵检测与对抗样本检测
"""

__version__ = "1.0.0"
