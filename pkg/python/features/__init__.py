# Minutia map features for fpembed
