"""Dataset ingestion, synthetic corpora, annotation caching, training and evaluation."""
