#! /usr/bin/env python
'''
obsdiff setup script
'''
import os

from setuptools import setup, find_packages

def readme():
    with open('README.md') as f:
        return f.read()

version = {}
with open(os.path.join('obsdiff', 'version.py')) as fp:
    exec(fp.read(), version)

setup(name='obsdiff',
      version=version['version'],
      packages=find_packages(exclude=['examples', 'examples.*']),
      install_requires=['numpy',
                        'scipy',
                        'brian2>=2.2',
                        'pandas',
                        'setuptools',
                        'tqdm',
                        ],
      provides=['obsdiff'],
      extras_require={'test': ['pytest'],
                      'docs': ['sphinx>=1.8']},
      entry_points={'console_scripts': ['obsdiff = obsdiff.cli:main']},
      python_requires='>=3.7',
      zip_safe=False,
      description='One-shot second-order pruning of diffusion transformers',
      long_description=readme(),
      long_description_content_type='text/markdown',
      license='CeCILL-2.1',
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Science/Research',
          'License :: OSI Approved :: CEA CNRS Inria Logiciel Libre License, version 2.1 (CeCILL-2.1)',
          'Natural Language :: English',
          'Operating System :: OS Independent',
          'Programming Language :: Python',
          'Programming Language :: Python :: 3',
          'Topic :: Scientific/Engineering :: Artificial Intelligence'
      ],
      keywords='pruning optimal brain surgeon diffusion transformer sparsity'
      )
