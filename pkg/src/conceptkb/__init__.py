"""Concept-centric multimodal knowledge base toolkit.

Builds a KB of linguistic concepts from image-text pairs and encyclopedia
dumps (concept mining, cross-modal grounding with attention relevance maps,
LLM description completion), and serves it through statistics, image
retrieval, and prompt-based evaluation harnesses.
"""

__version__ = "0.1.0"
