"""cslab: a desk-scale lab for code-switching sequence recognition.

Language-aware encoder stacks (shared trunk + two experts), softmax
gating, CTC training with language-aware targets, a cosine
disentanglement objective, a synthetic bilingual corpus, and the
scoring/analysis kit to compare the fusion variants.
"""

__version__ = "0.1.0"
