"""synclab: a desk-scale audio-synchronized generation lab.

Subsystems: diffcore (tensors + autodiff), audio_dsp (onsets, peaks, shifts),
synth_world (paired synthetic audio/latents + oracle V2A), toy_model
(flow-matching transformer with audio cross-attention), sampler (guided Euler
sampling), sync_metrics (CycleSync / AV-Align / delay sweep), experiments and
cli (the harness).
"""

__version__ = "0.1.0"
