"""Corpus data factory.

Cleans, scores, filters, deduplicates, gates, and packs text corpora into
training sequences, and fits a data-centric scaling law relating test loss
to data attributes (coherence, readability, similarity) and volume.
"""

__version__ = "0.1.0"
