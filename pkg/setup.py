import os

from setuptools import setup, find_packages


here = os.path.dirname(__file__)

with open(os.path.join(here, 'requirements.txt')) as f:
    requirements = [
        l.strip() for l in f.readlines()
        if l.strip() and not l.strip().startswith('#')
    ]

with open(os.path.join(here, 'README.md'), encoding="utf8") as f:
    readme = f.read()

version_ns = {}
with open(os.path.join(here, 'ebcbf', '_version.py')) as f:
    exec(f.read(), {}, version_ns)

setup(
    name='ebcbf',
    version=version_ns['__version__'],
    python_requires='>=3.7',
    license='BSD',
    # this should be a whitespace separated string of keywords, not a list
    keywords="control barrier function gaussian process port-hamiltonian safety",
    description="Energy-aware Bayesian safety filters from port-Hamiltonian Gaussian process models",
    long_description=readme,
    long_description_content_type='text/markdown',
    packages=find_packages(),
    package_data={
        'ebcbf': ['event-schemas/*.json', 'file-schemas/*.json'],
    },
    include_package_data=True,
    install_requires=requirements,
    entry_points={
        'console_scripts': [
            'ebcbf = ebcbf.app:main',
        ],
    },
)
