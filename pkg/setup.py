from typing import Optional

from setuptools import setup, find_packages


package_name = 'unislam'


def get_version() -> Optional[str]:
    with open('unislam/__init__.py', 'r') as f:
        lines = f.readlines()
    for line in lines:
        if line.startswith('__version__'):
            return line.split('=')[-1].strip().strip("'")


def get_long_description() -> str:
    with open('README.md', encoding='utf8') as f:
        return f.read()


setup(
    name=package_name,
    description='Desk-scale dense RGB-D SLAM with hash-grid neural fields and uncertainty-aware bundle adjustment.',
    long_description=get_long_description(),
    long_description_content_type='text/markdown',
    classifiers=[
        'Environment :: Console',
        'Operating System :: OS Independent',
        'Topic :: Scientific/Engineering :: Image Recognition',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    packages=find_packages(exclude=['tests', 'tests.*', 'examples', 'examples.*']),
    include_package_data=True,
    keywords='slam rgbd neural-field sdf volume-rendering',
    version=get_version(),
    python_requires='>=3.8',
    install_requires=[
        'setuptools',
        'numpy>=1.21',
        'scipy>=1.8',
        'torch>=2.0',
        'opencv-python>=4.5',
        'scikit-image>=0.19',
        'trimesh>=4.0',
        'typing_extensions>=4.0',
    ],
    entry_points={
        'console_scripts': ['unislam = unislam.cli:main'],
    },
    license='MIT',
    zip_safe=False,
)
