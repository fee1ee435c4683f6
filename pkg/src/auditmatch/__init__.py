"""Zero-shot matching of financial report segments to accounting requirements.

Stage 1 ranks report segments by embedding cosine similarity; stage 2
optionally asks a chat LLM to pick the best k of the top m. The package
also carries the offline evaluation harness (sensitivity, MAP, F1).
"""

__version__ = "0.1.0"
