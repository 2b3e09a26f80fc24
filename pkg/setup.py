#!/usr/bin/env python
from setuptools import setup, find_packages

setup(name='contextual-sr',
    version='0.1.0',
    description='Contextualized multi-task image super-resolution',
    license='BSD',
    packages=find_packages(exclude=['example_project', 'example_project.*']),
    include_package_data=True,
    python_requires='>=3.8',
    tests_require=[
        'freezegun',
    ],
    test_suite='runtests.runtests',
    install_requires=[
        'numpy>=1.20',
        'scipy>=1.6',
        'Pillow>=8.0',
        'scikit-image>=0.19',
        'setuptools',
    ],
    entry_points={
        'console_scripts': ['cmsr = cmsr.cli:main'],
    },
    zip_safe=False,
    classifiers=[
        'Development Status :: 4 - Beta',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: BSD License',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Image Processing'],
)
