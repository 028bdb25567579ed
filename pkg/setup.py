#!/usr/bin/env python
from setuptools import find_packages, setup


setup(
    name="umc",
    version="1.0.0",
    description="Forward-only simulation of multi-resolution collaborative perception with "
                "entropy-based communication selection and exact bandwidth accounting.",
    license="MIT",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "numpy>=1.17",
        "pyyaml>=5.1",
        "tensorboardX>=1.2",
        "torch>=1.10",
        "tqdm>=4.28",
        "yacs>=0.1.6",
    ],
    extras_require={"dev": ["pytest>=6.0"]},
    entry_points={"console_scripts": ["umc = umc.cli:main"]},
    zip_safe=True,
)
