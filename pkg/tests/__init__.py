# Test package for SCA Lab
