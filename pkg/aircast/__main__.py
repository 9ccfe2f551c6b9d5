#!/usr/bin/env python
# -*- coding: utf-8 -*-
# ==================================
# File Name: __main__.py
# ==================================

from aircast.cli import run

if __name__ == '__main__':
    run()
