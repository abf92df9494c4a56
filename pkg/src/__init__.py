"""
specslh - Source Code Package
"""
