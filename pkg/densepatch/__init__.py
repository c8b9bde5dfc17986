from densepatch.errors import DensepatchError
