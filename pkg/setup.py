from setuptools import find_packages, setup

setup(
    name='fedsim',
    version='0.1.0',
    description='A federated optimisation laboratory for FedSSO and first-order baselines.',
    packages=find_packages(exclude=['tests']),
    python_requires='>=3.8',
    install_requires=[
        'numpy',
        'scipy',
        'pandas>=1.5',
        'plac>=1.1',
        'toml',
        'pydantic>=2',
    ],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['fedsim=fedsim.cli:main']},
)
