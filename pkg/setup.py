import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="flexisurf",
    version="0.0.1",
    description="Differentiable isosurface extraction on flexible grids, with a mesh fitting CLI",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),
    classifiers=["Programming Language :: Python :: 3",],
    python_requires=">=3.8",
    entry_points={"console_scripts": ["flexisurf=flexisurf.__main__:entrypoint"]},
    install_requires=[
        "arrow==1.3.0",
        "braceexpand==0.1.7",
        "Click==8.1.7",
        "numpy==1.26.4",
        "pyaml==23.9.7",
        "PyYAML==6.0.1",
        "rtree==1.2.0",
        "scipy==1.12.0",
        "torch==2.2.2",
        "trimesh==4.1.7",
        "typing-extensions==4.10.0",
        "yamllint==1.35.1",
        "wcmatch==8.5.1",
    ],
    extras_require={
        "dev": [
            "black==24.2.0",
            "mypy==1.9.0",
            "pylint==3.1.0",
            "pytest==8.1.1",
            "pytest-cov==4.1.0",
        ]
    },
)
