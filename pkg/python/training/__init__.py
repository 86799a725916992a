# Training loop for fpembed
