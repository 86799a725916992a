# Network, losses and persistence for fpembed
