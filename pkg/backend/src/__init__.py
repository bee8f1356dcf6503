# Backend src package
