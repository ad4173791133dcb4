#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Python script to run rmoe from a checkout without installing the console script

import sys

from rmoe.runner import main

sys.exit(main())
