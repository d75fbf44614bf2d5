from setuptools import setup, find_packages

setup(
    name='imvc',
    version='0.1',
    packages=find_packages(exclude=['tests']),
    entry_points={
        'console_scripts': ['imvc=imvc.cli:main'],
    },
)
