# Copyright (c) the django-ddrm authors.
# Licensed under the BSD license.

from os import path

from setuptools import find_packages, setup

CLASSIFIERS = [
    'License :: OSI Approved :: BSD License',
    'Framework :: Django',
    "Operating System :: MacOS",
    "Operating System :: POSIX :: Linux",
    "Operating System :: Microsoft :: Windows",
    'Programming Language :: Python',
    'Programming Language :: Python :: 3.8',
    'Programming Language :: Python :: 3.9',
    'Programming Language :: Python :: 3.10',
    'Framework :: Django :: 3.2',
    'Framework :: Django :: 4.0',
    'Topic :: Scientific/Engineering :: Artificial Intelligence',
]

this_directory = path.abspath(path.dirname(__file__))
with open(path.join(this_directory, 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='django-ddrm',
    version='0.1',
    description='Denoising diffusion refinement of recommender embeddings as Django management commands',
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='BSD',
    packages=find_packages(exclude=['testapp', 'testapp.*']),
    python_requires='>=3.8',
    install_requires=[
        'django>=3.2,<4.1',
        'numpy>=1.21',
        'scipy>=1.8',
    ],
    classifiers=CLASSIFIERS,
    keywords='django recommender diffusion denoising',
)
