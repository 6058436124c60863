import os, re
from setuptools import setup, find_packages

# Read __version__.py for version information
def read_version():
    with open(os.path.join("tcs_fedsim", "__version__.py")) as f:
        content = f.read()
    match = re.search(r'__version__ = ["\'](.+)["\']', content)
    if match:
        return match.group(1)
    raise RuntimeError("Unable to find version string.")

# Read README file for long description
try:
    with open('README.md', 'r', encoding='utf-8') as fh:
        long_description = fh.read()
except FileNotFoundError:
    long_description = 'Time-correlated sparsification for federated learning, with a desk-scale simulator.'

setup(
    name='tcs_fedsim',
    version=read_version(),
    packages=find_packages(exclude=['tests', 'tests.*']),
    python_requires='>=3.9',
    install_requires=[
        'numpy>=1.23',
        'scipy>=1.9',
        'pydantic>=2.8.2',
    ],
    extras_require={
        'dev': [
            'pytest>=7.0.0',
            'pytest-cov>=4.0.0',
            'black>=23.0.0',
            'flake8>=5.0.0',
            'mypy>=1.0.0',
        ],
        'test': [
            'pytest>=7.0.0',
            'pytest-cov>=4.0.0',
        ],
    },
    entry_points={
        'console_scripts': [
            'tcs-fedsim=tcs_fedsim.cli:main',
        ]
    },
    description='Gradient compression toolkit and federated learning simulator using time-correlated sparsification.',
    long_description=long_description,
    long_description_content_type='text/markdown',
    license='MIT',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Topic :: Software Development :: Libraries :: Python Modules',
    ],
    keywords='federated-learning gradient-compression sparsification quantization error-feedback',
)
