from setuptools import setup

setup(
    name="kalgrad",
    version="0.1.0",
    description="kalgrad: learning the steady-state Kalman gain by stochastic gradient descent",
    packages=["kalgrad"],
    package_dir={"kalgrad": "."},
    package_data={"kalgrad": ["src/*.py", "configs/*.yml"]},
    include_package_data=True,
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "PyYAML>=6.0",
    ],
    extras_require={"test": ["pytest>=7"]},
    entry_points={
        'console_scripts': [
            'kalgrad=kalgrad.wrapper:main',
        ],
    },
)
