"""Two-stage text ranking: first-stage retrieval, a distilled feature-based reranker, NDCG evaluation."""

__version__ = "0.1.0"
