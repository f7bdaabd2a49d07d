"""Numerical core of the CoLReg desk-scale pipeline.

geometry: corner parameterization, homographies and warping
mimfeat: handcrafted MIM and the learnable MIM encoders
mimgcd: MIM-guided conditional diffusion translator
regnet: multi-scale iterative registration network and its losses
datapipe, batches: datasets and stage batches
evaluate: corner-error metrics and reports
"""
