""" Unit Test Suite for fcca-rewardgen
"""
