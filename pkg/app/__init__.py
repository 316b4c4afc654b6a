"""
ModalPatch: compensation for dropped sensor modalities on synthetic feature streams.

Contains service modules for the autodiff substrate, stream generation,
history-based prediction, uncertainty-guided fusion, training and reports.
"""
