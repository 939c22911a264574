"""
GSC Desk - generative semantic image coding at toy scale
"""
