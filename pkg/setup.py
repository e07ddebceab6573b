from setuptools import setup

requirements = [
    'PyYAML',
    'numpy',
    'openai',
    'tenacity',
    'matplotlib',
]

classifiers = [
    'Intended Audience :: Science/Research',
    'Topic :: Scientific/Engineering :: Artificial Intelligence',
    'Programming Language :: Python :: 3',
]

with open('README.md') as f:
    readme = f.read()

proj_license = 'MIT'

setup(name="fcca_rewardgen",
      version='0.3.0',
      description='A command line tool and library for generating and tuning reward programs for multi-agent formation control with a language model',
      long_description_content_type='text/markdown',
      long_description=readme,
      license=proj_license,
      packages=['fcca_rewardgen'],
      python_requires='>=3.8',
      entry_points={
          'console_scripts': [
              'fcca-rewardgen = fcca_rewardgen.__main__:main'
          ]
      },
      install_requires=requirements,
      classifiers=classifiers
      )
