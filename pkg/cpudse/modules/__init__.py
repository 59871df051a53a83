# Modules
