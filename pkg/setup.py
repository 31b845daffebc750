from __future__ import annotations

import os

from setuptools import find_packages, setup

this_dir = os.path.abspath(os.path.dirname(__file__))

with open(os.path.join(this_dir, "README.md"), encoding="utf-8") as f:
    long_description = f.read()

setup(
    name="disreg",
    version="0.1.0",
    description="disreg is a library for unsupervised multimodal groupwise image registration with hierarchical "
    "disentangled variational auto-encoders.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    keywords=[
        "image registration",
        "groupwise registration",
        "multimodal",
        "diffeomorphism",
        "variational auto-encoder",
        "medical imaging",
        "deep learning",
    ],
    packages=find_packages(exclude=["tests", "tests.*"]),
    package_data={
        "disreg": ["*.md"],
    },
    install_requires=(
        "numpy",
        "pytorch_lightning",
        "pyyaml",
        "scipy",
        "tabulate",
        "torch",
        "torchmetrics",
        "tqdm",
    ),
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: BSD License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Image Processing",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Software Development :: Libraries :: Python Modules",
    ],
    entry_points={
        "console_scripts": [
            "dreg = disreg.cli:main",
        ]
    },
)
