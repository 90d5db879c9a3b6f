"""Miniature fully-convolutional networks with hand-written gradients."""
