"""Encrypted TCP traffic classification toolkit.

Pipeline: pcap ingest -> bidirectional flows -> multi-granularity token
sequences -> attention encoder -> contrastive pre-training -> supervised
fine-tuning -> pseudo-label iteration over unlabeled traffic.
"""

__version__ = "0.1.0"
