"""Room-acoustic environment embeddings from reverberant speech.

Pipeline: shoebox RIR simulation (image source method) -> reverberant
speech augmentation -> contrastive encoder training -> downstream
RT60/C50 regression and room-volume classification.
"""

__version__ = "0.1.0"
