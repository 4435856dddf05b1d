"""Arabic aspect-sentiment polarity classification with BERT.

Corpus ingestion for HAAD, the Arabic news corpus and the SemEval-2016 Arabic
hotel reviews, a majority baseline, and single/pair-input BERT fine-tuning.
"""

__version__ = "0.1.0"
