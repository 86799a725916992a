# Data handling package for fpembed
