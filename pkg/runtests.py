#!/usr/bin/env python
import sys
import unittest
from os.path import dirname, abspath, join
from optparse import OptionParser


def runtests(options={}):
    parent = dirname(abspath(__file__))
    sys.path.insert(0, parent)
    suite = unittest.defaultTestLoader.discover(join(parent, 'cmsr'),
                                                top_level_dir=parent)
    runner = unittest.TextTestRunner(
        verbosity=int(options.get('verbosity', 1)),
        failfast=options.get('failfast', False))
    result = runner.run(suite)
    sys.exit(not result.wasSuccessful())

if __name__ == '__main__':
    parser = OptionParser()
    parser.add_option('--verbosity', default=1, dest='verbosity')
    parser.add_option('--failfast', action='store_true', default=False,
        dest='failfast')

    (options, args) = parser.parse_args()

    runtests(vars(options))
