# Problem data: supports, densities and reference maps
