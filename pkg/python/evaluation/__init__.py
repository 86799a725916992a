# Verification metrics for fpembed
