# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

"""
Denoising diffusion over pre-trained recommender embeddings, packaged as a Django app.
"""

VERSION = (0, 1, 0)
