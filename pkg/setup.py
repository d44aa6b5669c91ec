from setuptools import setup, find_packages

setup(name='trafficflow',
      version='1.0',
      packages=find_packages(exclude=['test']),
      install_requires=['numpy', 'scipy', 'shapely>=2.0', 'matplotlib'],
      entry_points={'console_scripts': ['trafficflow=trafficflow.cli:main']})
