# stage commands registered on the CLI group in main.py
