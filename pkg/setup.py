#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: setup.py
# ==================================

from setuptools import find_packages, setup

with open('requirements.txt', 'r') as fp:
    requirements = [line.strip() for line in fp if line.strip() and not line.startswith('#')]

setup(
    name='aircast',
    version='0.1.0',
    description='Station-level multi-pollutant air-quality forecasting with site and met/emission coupling',
    packages=find_packages(exclude=('tests',)),
    python_requires='>=3.10',
    install_requires=[r for r in requirements if not r.startswith('pytest')],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['aircast=aircast.cli:run']},
)
